// partcraft: command-line front end for discovery, training, generation,
// evaluation and the HTTP service.

#include "partcraft/evaluation.hpp"
#include "partcraft/service.hpp"
#include "partcraft/sprites.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

using namespace partcraft;
namespace fs = std::filesystem;

namespace {

std::vector<std::pair<std::string, Image>> load_folder(const fs::path& dir) {
  std::vector<std::pair<std::string, Image>> out;
  for (const auto& p : list_images(dir)) out.emplace_back(p.stem().string(), read_image(p));
  if (out.empty()) throw InputError("no images in " + dir.string());
  return out;
}

/// Points the dictionary's image paths at `dir` when given.
void rebase_images(PartDictionary& dict, const std::string& dir) {
  if (dir.empty()) return;
  for (auto& img : dict.images) img.path = fs::path(dir) / img.path.filename();
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

backend::BaseModel obtain_base(const std::string& base_path, const PartDictionary& dict, int pretrain_steps) {
  if (!base_path.empty()) return backend::BaseModel::load(base_path);
  std::cerr << "no --base given; pretraining a base model for " << pretrain_steps << " steps\n";
  auto base = backend::BaseModel::create({});
  std::vector<Matrix> latents;
  for (const auto& img : dict.images) latents.push_back(base.autoencoder.encode(read_image(img.path)));
  backend::PretrainConfig pc;
  pc.steps = pretrain_steps;
  backend::pretrain_base(base, latents, pc);
  return base;
}

std::vector<EvalImage> eval_images_from(const PartDictionary& dict, const std::string& folder) {
  std::vector<EvalImage> out;
  if (!folder.empty()) {
    for (auto& [id, img] : load_folder(folder)) out.push_back({id, std::move(img)});
  } else {
    for (const auto& t : dict.images) out.push_back({t.id, read_image(t.path)});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part discovery, part-token training and composition for text-to-image diffusion"};
  app.require_subcommand(1);

  // sprites
  auto* sprites_cmd = app.add_subcommand("sprites", "Write the procedural sprite corpus as PNGs");
  std::string sprites_out;
  sprites::SpriteConfig sprite_cfg;
  sprites_cmd->add_option("--out", sprites_out, "Output directory")->required();
  sprites_cmd->add_option("--count", sprite_cfg.count, "Number of sprites")->capture_default_str();
  sprites_cmd->add_option("--seed", sprite_cfg.seed, "Generator seed")->capture_default_str();
  sprites_cmd->add_option("--mix", sprite_cfg.mix_probability, "Probability of cross-species part mixes")->capture_default_str();
  sprites_cmd->add_option("--jitter", sprite_cfg.jitter, "Maximum shift in patches")->capture_default_str();

  // discover
  auto* discover_cmd = app.add_subcommand("discover", "Fit the part hierarchy and tag every image");
  std::string images_dir, dict_path;
  int parts = 3, variants = 4;
  std::uint64_t discover_seed = 0;
  discover_cmd->add_option("--images", images_dir, "Image directory")->required()->check(CLI::ExistingDirectory);
  discover_cmd->add_option("--parts", parts, "Part slots M")->capture_default_str();
  discover_cmd->add_option("--variants", variants, "Variants per slot K")->capture_default_str();
  discover_cmd->add_option("--seed", discover_seed, "Clustering seed")->capture_default_str();
  discover_cmd->add_option("--out", dict_path, "Dictionary file to write")->required();

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Fit the base denoiser on a generic prompt");
  std::string base_out;
  backend::PretrainConfig pretrain_cfg;
  pretrain_cmd->add_option("--images", images_dir, "Image directory")->required()->check(CLI::ExistingDirectory);
  pretrain_cmd->add_option("--steps", pretrain_cfg.steps, "Optimizer steps")->capture_default_str();
  pretrain_cmd->add_option("--seed", pretrain_cfg.seed, "Sampling seed")->capture_default_str();
  pretrain_cmd->add_option("--out", base_out, "Base model file to write")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Learn part tokens, projector and LoRA adapters");
  std::string config_path, ckpt_path, base_path, log_path, ckpt_dir;
  int inline_pretrain_steps = 3000;
  train_cmd->add_option("--dict", dict_path, "Part dictionary")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--images", images_dir, "Directory holding the dictionary's images");
  train_cmd->add_option("--config", config_path, "Training config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", ckpt_path, "Checkpoint file to write")->required();
  train_cmd->add_option("--base", base_path, "Pretrained base model")->check(CLI::ExistingFile);
  train_cmd->add_option("--pretrain-steps", inline_pretrain_steps, "Base pretraining steps when --base is omitted")
      ->capture_default_str();
  train_cmd->add_option("--log", log_path, "Per-step JSON lines log");
  train_cmd->add_option("--checkpoint-dir", ckpt_dir, "Directory for periodic checkpoints");

  // generate
  auto* generate_cmd = app.add_subcommand("generate", "Generate an image from a part composition");
  std::string compose, style, out_png;
  GenerationRequest gen_req;
  gen_req.guidance = 1.0;
  generate_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--compose", compose, "Codes as slot:variant pairs, e.g. 0:2,1:1,2:4,3:3")->required();
  generate_cmd->add_option("--style", style, "Free text appended after the part tokens");
  generate_cmd->add_option("--seed", gen_req.seed, "Sampling seed")->capture_default_str();
  generate_cmd->add_option("--steps", gen_req.steps, "Sampler steps")->capture_default_str();
  generate_cmd->add_option("--guidance", gen_req.guidance, "Classifier-free guidance scale")->capture_default_str();
  generate_cmd->add_option("--out", out_png, "PNG to write (provenance goes next to it as .json)")->required();

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score EMR and CoSim for reconstruction or composition");
  std::string protocol = "recon", report_path, eval_images;
  EvalOptions eval_opts;
  eval_opts.guidance = 1.0;
  evaluate_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--dict", dict_path, "Part dictionary")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--images", images_dir, "Directory holding the dictionary's images");
  evaluate_cmd->add_option("--eval-images", eval_images, "Evaluate on this folder instead of the dictionary's images");
  evaluate_cmd->add_option("--protocol", protocol, "recon or comp")->capture_default_str();
  evaluate_cmd->add_option("--mix", eval_opts.parts_mixed, "Parts mixed per sample (comp)")->capture_default_str();
  evaluate_cmd->add_option("--samples", eval_opts.samples, "Samples")->capture_default_str();
  evaluate_cmd->add_option("--seed", eval_opts.seed, "Sampling seed")->capture_default_str();
  evaluate_cmd->add_option("--steps", eval_opts.steps, "Sampler steps")->capture_default_str();
  evaluate_cmd->add_option("--guidance", eval_opts.guidance, "Classifier-free guidance scale")->capture_default_str();
  evaluate_cmd->add_option("--report", report_path, "Report JSON to write")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate one model per attention-loss weight");
  std::vector<double> lambdas = {0.1, 0.01, 0.001};
  sweep_cmd->add_option("--dict", dict_path, "Part dictionary")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--images", images_dir, "Directory holding the dictionary's images");
  sweep_cmd->add_option("--config", config_path, "Training config JSON")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--base", base_path, "Pretrained base model")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--lambdas", lambdas, "Attention-loss weights")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--eval-images", eval_images, "Held-out evaluation folder");
  sweep_cmd->add_option("--samples", eval_opts.samples, "Samples per model")->capture_default_str();
  sweep_cmd->add_option("--guidance", eval_opts.guidance, "Classifier-free guidance scale")->capture_default_str();
  sweep_cmd->add_option("--report", report_path, "Table JSON to write")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  std::string data_dir, host = "127.0.0.1";
  int port = 8080, workers = 1;
  serve_cmd->add_option("--dict", dict_path, "Part dictionary")->check(CLI::ExistingFile);
  serve_cmd->add_option("--images", images_dir, "Directory holding the dictionary's images");
  serve_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->check(CLI::ExistingFile);
  serve_cmd->add_option("--data", data_dir, "Job and image store")->required();
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Port")->capture_default_str();
  serve_cmd->add_option("--workers", workers, "Concurrent generations")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sprites_cmd) {
      fs::create_directories(sprites_out);
      const auto corpus = sprites::make_corpus(sprite_cfg);
      nlohmann::json truth = nlohmann::json::array();
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sprite_%04zu", i);
        write_png(corpus[i].image, fs::path(sprites_out) / (std::string(name) + ".png"));
        truth.push_back({{"id", name},
                         {"species", corpus[i].species},
                         {"variants", corpus[i].variants},
                         {"patch_labels", corpus[i].patch_labels}});
      }
      write_json(truth, fs::path(sprites_out) / "ground_truth.json");
      std::cout << "wrote " << corpus.size() << " sprites to " << sprites_out << '\n';
    } else if (*discover_cmd) {
      PatchDescriptorExtractor extractor;
      auto dict = discover_parts(list_images(images_dir), parts, variants, discover_seed, extractor);
      save_dictionary(dict, dict_path);
      std::cout << "tagged " << dict.images.size() << " images into " << parts << " parts x " << variants
                << " variants -> " << dict_path << '\n';
    } else if (*pretrain_cmd) {
      auto base = backend::BaseModel::create({});
      std::vector<Matrix> latents;
      for (const auto& p : list_images(images_dir)) latents.push_back(base.autoencoder.encode(read_image(p)));
      if (latents.empty()) throw InputError("no images in " + images_dir);
      const double loss = backend::pretrain_base(base, latents, pretrain_cfg);
      base.save(base_out);
      std::cout << "pretrained base (final loss " << loss << ") -> " << base_out << '\n';
    } else if (*train_cmd) {
      auto dict = load_dictionary(dict_path);
      rebase_images(dict, images_dir);
      const auto config = load_training_config(config_path);
      const auto base = obtain_base(base_path, dict, inline_pretrain_steps);
      auto corpus = load_training_corpus(dict, base.autoencoder.grid());
      std::ofstream log;
      if (!log_path.empty()) log.open(log_path);
      Trainer::Options options;
      options.checkpoint_dir = ckpt_dir;
      options.on_step = [&](const StepLog& s) {
        if (log.is_open()) log << to_json(s).dump() << '\n';
        if (s.step % 500 == 0) {
          std::cerr << "step " << s.step << " ldm " << s.ldm << " attn " << s.attn << " total " << s.total << '\n';
        }
      };
      const TrainState state = train(base, dict, std::move(corpus), config, options);
      state.save(ckpt_path);
      std::cout << "trained " << state.step << " steps -> " << ckpt_path << " (id " << state.checkpoint_id() << ")\n";
    } else if (*generate_cmd) {
      auto state = std::make_shared<TrainState>(TrainState::load(ckpt_path));
      DiffusionGenerator generator(state);
      gen_req.composition = parse_composition(compose, state->tokens.parts());
      gen_req.style_suffix = style;
      const auto result = generator.generate(gen_req);
      write_png(result.image, out_png);
      write_json(to_json(result.provenance), fs::path(out_png).replace_extension(".json"));
      std::cout << result.provenance.prompt << " -> " << out_png << '\n';
    } else if (*evaluate_cmd) {
      auto dict = load_dictionary(dict_path);
      rebase_images(dict, images_dir);
      auto state = std::make_shared<TrainState>(TrainState::load(ckpt_path));
      DiffusionGenerator generator(state);
      const auto proto = eval_protocol_from_string(protocol);
      if (proto == EvalProtocol::Reconstruction) eval_opts.parts_mixed = 1;
      const auto report = eval_composition(eval_images_from(dict, eval_images), generator, dict.hierarchy, eval_opts);
      write_json(to_json(report), report_path);
      std::cout << to_string(report.protocol) << " mix " << report.n_composited_parts << ": EMR " << report.emr
                << " CoSim " << report.cosim << " over " << report.n_samples << " samples -> " << report_path << '\n';
    } else if (*sweep_cmd) {
      auto dict = load_dictionary(dict_path);
      rebase_images(dict, images_dir);
      const auto config = load_training_config(config_path);
      const auto base = obtain_base(base_path, dict, inline_pretrain_steps);
      SweepInputs inputs;
      inputs.base = &base;
      inputs.dictionary = &dict;
      inputs.training = load_training_corpus(dict, base.autoencoder.grid());
      inputs.evaluation = eval_images_from(dict, eval_images);
      for (std::size_t i = 0; i < inputs.training.size() && i < 16; ++i) {
        const auto& ex = inputs.training[i];
        inputs.probes.push_back({ex.composition, ex.image, ex.masks});
      }
      const auto table = lambda_sweep(inputs, config, lambdas, eval_opts);
      write_json(to_json(table), report_path);
      std::cout << format_sweep(table);
    } else if (*serve_cmd) {
      std::shared_ptr<PartDictionary> dict;
      if (!dict_path.empty()) {
        dict = std::make_shared<PartDictionary>(load_dictionary(dict_path));
        rebase_images(*dict, images_dir);
      }
      std::shared_ptr<const ImageGenerator> generator;
      if (!ckpt_path.empty()) generator = std::make_shared<DiffusionGenerator>(std::make_shared<TrainState>(TrainState::load(ckpt_path)));
      ServiceConfig cfg;
      cfg.data_dir = data_dir;
      cfg.workers = generator ? workers : 0;
      cfg.defaults.guidance = 1.0;
      PartService service(dict, generator, cfg);
      std::cout << "serving on http://" << host << ":" << port << '\n';
      service.listen(host, port);
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
