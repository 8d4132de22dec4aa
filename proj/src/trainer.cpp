#include "partcraft/trainer.hpp"

#include "partcraft/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace partcraft {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("config field '" + field + "' " + what);
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

bool grads_finite(const std::vector<ad::Parameter*>& params) {
  for (const ad::Parameter* p : params)
    if (!p->grad.allFinite()) return false;
  return true;
}

}  // namespace

// ------------------------------------------------------------------ config

void TrainingConfig::validate() const {
  require(!attention_layers.empty(), "attn.layers", "must list at least one layer");
  require(std::isfinite(attention_lambda) && attention_lambda >= 0.0, "attn.lambda", "must be finite and >= 0");
  require(attention_resolution >= 1, "attn.resolution", "must be >= 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "optimizer.learning_rate", "must be finite and >= 0");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "optimizer.weight_decay", "must be finite and >= 0");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(gradient_accumulation >= 1, "gradient_accumulation", "must be >= 1");
  require(epochs >= 1, "epochs", "must be >= 1");
  require(max_steps >= 0, "max_steps", "must be >= 0");
  require(image_resolution >= 1, "image_resolution", "must be >= 1");
  require(lora_rank >= 1, "lora.rank", "must be >= 1");
  require(std::isfinite(lora_alpha) && lora_alpha > 0.0, "lora.alpha", "must be > 0");
  require(!lora_targets.empty(), "lora.targets", "must not be empty");
  require(bottleneck_hidden >= 0, "tokens.hidden", "must be >= 0");
  require(std::isfinite(init_noise) && init_noise >= 0.0, "tokens.init_noise", "must be >= 0");
  require(checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0");
  const auto first = prompt_template.find(PromptSpec::kPlaceholder);
  require(first != std::string::npos && prompt_template.find(PromptSpec::kPlaceholder, first + 1) == std::string::npos,
          "tokens.template", "must contain exactly one [*]");
}

json to_json(const TrainingConfig& c) {
  json targets = json::array();
  for (auto t : c.lora_targets) targets.push_back(backend::to_string(t));
  return {{"schema", TrainingConfig::kSchema},
          {"version", TrainingConfig::kVersion},
          {"attn",
           {{"layers", c.attention_layers},
            {"lambda", c.attention_lambda},
            {"resolution", c.attention_resolution},
            {"loss", c.attention_loss == AttentionLossKind::Entropy ? "entropy" : "mse"}}},
          {"optimizer", {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}}},
          {"batch_size", c.batch_size},
          {"gradient_accumulation", c.gradient_accumulation},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"image_resolution", c.image_resolution},
          {"augmentation", {{"horizontal_flip", c.horizontal_flip}}},
          {"lora", {{"rank", c.lora_rank}, {"alpha", c.lora_alpha}, {"targets", targets}}},
          {"tokens",
           {{"bottleneck", to_string(c.bottleneck)},
            {"hidden", c.bottleneck_hidden},
            {"init_word", c.init_word},
            {"init_noise", c.init_noise},
            {"template", c.prompt_template}}},
          {"checkpoint_interval", c.checkpoint_interval},
          {"seed", c.seed}};
}

TrainingConfig training_config_from_json(const json& j) {
  reject_unknown(j,
                 {"schema", "version", "attn", "optimizer", "batch_size", "gradient_accumulation", "epochs", "max_steps",
                  "image_resolution", "augmentation", "lora", "tokens", "checkpoint_interval", "seed"},
                 "");
  if (j.contains("schema") && j.at("schema") != TrainingConfig::kSchema) throw ConfigError("not a training config");
  if (j.contains("version") && j.at("version") != TrainingConfig::kVersion) throw ConfigError("unsupported training config version");
  TrainingConfig c;
  if (j.contains("attn")) {
    const json& a = j.at("attn");
    reject_unknown(a, {"layers", "lambda", "resolution", "loss"}, "attn");
    read_field(a, "layers", c.attention_layers, "attn");
    read_field(a, "lambda", c.attention_lambda, "attn");
    read_field(a, "resolution", c.attention_resolution, "attn");
    if (a.contains("loss")) {
      try {
        c.attention_loss = attention_loss_kind_from_string(a.at("loss").get<std::string>());
      } catch (const Error&) {
        throw;
      } catch (const json::exception&) {
        throw ConfigError("config field 'attn.loss' has the wrong type");
      }
    }
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    reject_unknown(o, {"learning_rate", "weight_decay"}, "optimizer");
    read_field(o, "learning_rate", c.learning_rate, "optimizer");
    read_field(o, "weight_decay", c.weight_decay, "optimizer");
  }
  read_field(j, "batch_size", c.batch_size, "");
  read_field(j, "gradient_accumulation", c.gradient_accumulation, "");
  read_field(j, "epochs", c.epochs, "");
  read_field(j, "max_steps", c.max_steps, "");
  read_field(j, "image_resolution", c.image_resolution, "");
  if (j.contains("augmentation")) {
    reject_unknown(j.at("augmentation"), {"horizontal_flip"}, "augmentation");
    read_field(j.at("augmentation"), "horizontal_flip", c.horizontal_flip, "augmentation");
  }
  if (j.contains("lora")) {
    const json& l = j.at("lora");
    reject_unknown(l, {"rank", "alpha", "targets"}, "lora");
    read_field(l, "rank", c.lora_rank, "lora");
    read_field(l, "alpha", c.lora_alpha, "lora");
    if (l.contains("targets")) {
      std::vector<std::string> names;
      read_field(l, "targets", names, "lora");
      c.lora_targets.clear();
      for (const auto& n : names) c.lora_targets.push_back(backend::lora_target_from_string(n));
    }
  }
  if (j.contains("tokens")) {
    const json& t = j.at("tokens");
    reject_unknown(t, {"bottleneck", "hidden", "init_word", "init_noise", "template"}, "tokens");
    if (t.contains("bottleneck")) {
      std::string mode;
      read_field(t, "bottleneck", mode, "tokens");
      try {
        c.bottleneck = bottleneck_mode_from_string(mode);
      } catch (const Error& e) {
        throw ConfigError(std::string("config field 'tokens.bottleneck': ") + e.what());
      }
    }
    read_field(t, "hidden", c.bottleneck_hidden, "tokens");
    read_field(t, "init_word", c.init_word, "tokens");
    read_field(t, "init_noise", c.init_noise, "tokens");
    read_field(t, "template", c.prompt_template, "tokens");
  }
  read_field(j, "checkpoint_interval", c.checkpoint_interval, "");
  read_field(j, "seed", c.seed, "");
  c.validate();
  return c;
}

TrainingConfig load_training_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return training_config_from_json(j);
}

void save_training_config(const TrainingConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_json(config).dump(2) << '\n';
}

// ------------------------------------------------------------------ corpus

TrainingExample flipped(const TrainingExample& example) {
  TrainingExample out = example;
  out.image = flip_horizontal(example.image);
  out.masks = flip_horizontal(example.masks);
  return out;
}

std::vector<TrainingExample> load_training_corpus(const PartDictionary& dict, GridSize attention_grid) {
  std::vector<TrainingExample> out;
  out.reserve(dict.images.size());
  for (const auto& tagged : dict.images) {
    TrainingExample ex;
    ex.id = tagged.id;
    ex.image = read_image(tagged.path);
    ex.composition = tagged.composition;
    ex.masks = tagged.masks(attention_grid);
    out.push_back(std::move(ex));
  }
  return out;
}

// ------------------------------------------------------------------- state

std::vector<ad::Parameter*> TrainState::trainable() {
  std::vector<ad::Parameter*> out = tokens.parameters();
  for (ad::Parameter* p : model.denoiser.lora_parameters()) out.push_back(p);
  return out;
}

std::string TrainState::checkpoint_id() const {
  Archive a;
  model.write(a, true);
  const Archive t = tokens.to_archive();
  a.tensors.insert(t.tensors.begin(), t.tensors.end());
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& [name, m] : a.tensors) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
  }
  return hex16(h);
}

Archive TrainState::to_archive() const {
  Archive a;
  model.write(a, true);
  Archive t = tokens.to_archive();
  a.meta["token_table"] = t.meta;
  a.tensors.insert(t.tensors.begin(), t.tensors.end());
  optimizer.write(a, "optim.");
  a.meta["checkpoint"] = {{"schema", kSchema}, {"version", kVersion}, {"step", step}, {"config", to_json(config)}};
  return a;
}

TrainState TrainState::from_archive(const Archive& archive) {
  if (!archive.meta.contains("checkpoint")) throw InputError("archive is not a training checkpoint");
  const json& meta = archive.meta.at("checkpoint");
  if (meta.value("schema", "") != kSchema || meta.value("version", 0) != kVersion) {
    throw InputError("unsupported checkpoint schema");
  }
  TrainState s;
  s.model = backend::BaseModel::read(archive);
  s.model.denoiser.read_lora(archive, "base.");
  s.tokens = TokenTable::from_archive(archive);
  s.tokens.set_trainable(true);
  s.optimizer = AdamW::read(archive, "optim.");
  s.step = meta.at("step").get<long>();
  s.config = training_config_from_json(meta.at("config"));
  return s;
}

void TrainState::save(const std::filesystem::path& path) const { write_archive(to_archive(), path); }

TrainState TrainState::load(const std::filesystem::path& path) { return from_archive(read_archive(path)); }

TrainState init_train_state(const backend::BaseModel& base, int parts, int variants, const TrainingConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = base;
  const GridSize grid = s.model.autoencoder.grid();
  if (config.attention_resolution != grid.rows || config.attention_resolution != grid.cols) {
    throw ConfigError("attn.resolution " + std::to_string(config.attention_resolution) + " does not match the backend's " +
                      std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " attention grid");
  }
  if (config.image_resolution != s.model.autoencoder.image_side()) {
    throw ConfigError("image_resolution " + std::to_string(config.image_resolution) + " does not match the backend's " +
                      std::to_string(s.model.autoencoder.image_side()) + " px input");
  }
  const auto layers = s.model.denoiser.attention_layers();
  for (const auto& id : config.attention_layers) {
    if (std::find(layers.begin(), layers.end(), id) == layers.end()) {
      throw ConfigError("unknown attention layer '" + id + "'");
    }
  }
  Rng rng(config.seed);
  for (ad::Parameter* p : s.model.frozen_parameters()) p->trainable = false;
  s.model.denoiser.add_lora(config.lora_rank, config.lora_targets, config.lora_alpha, rng);
  const Vocabulary& vocab = s.model.text_encoder.vocabulary();
  const RowVector anchor = s.model.text_encoder.word_embedding(vocab.word_id(config.init_word));
  const int hidden = config.bottleneck_hidden > 0 ? config.bottleneck_hidden : static_cast<int>(anchor.size());
  s.tokens = TokenTable::create(parts, variants, anchor, hidden, config.bottleneck, config.init_noise, rng);
  s.tokens.set_trainable(true);
  AdamW::Options o;
  o.learning_rate = config.learning_rate;
  o.weight_decay = config.weight_decay;
  s.optimizer = AdamW(o);
  return s;
}

// ------------------------------------------------------------------- losses

ad::Var ldm_loss(ad::Tape& tape, backend::Denoiser& denoiser, const backend::NoiseSchedule& schedule, const Matrix& z0,
                 const Matrix& eps, int t, ad::Var context, GraphAttentionRecord* attention) {
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw InputError("noise and latent shapes differ");
  if (t < 0 || t >= schedule.steps()) throw InputError("timestep out of range");
  backend::DenoiserOutput out;
  try {
    out = denoiser.forward(tape, tape.constant(schedule.add_noise(z0, eps, t)), t, context);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(std::string("denoiser failed at t=") + std::to_string(t) + ": " + e.what());
  }
  if (attention) *attention = std::move(out.attention);
  return ad::mse(out.eps, tape.constant(eps));
}

json to_json(const StepLog& log) {
  return {{"step", log.step},   {"epoch", log.epoch},         {"ldm", log.ldm},
          {"attn", log.attn},   {"total", log.total},         {"supervised", log.supervised},
          {"effective_batch", log.effective_batch}};
}

ExampleLoss example_loss(ad::Tape& tape, TrainState& state, const Matrix& latent, const PartComposition& composition,
                         const PartMaskSet& masks, int t, const Matrix& eps) {
  const TrainingConfig& cfg = state.config;
  PromptSpec spec;
  spec.template_text = cfg.prompt_template;
  spec.composition = composition;
  const TokenSequence tokens =
      render_prompt(spec, state.model.text_encoder.vocabulary(), state.tokens.parts(), state.tokens.variants());
  ad::Var part_rows;
  if (composition.present_count() > 0) part_rows = state.tokens.embed(tape, composition);
  ad::Var context = state.model.text_encoder.encode(tape, tokens, part_rows);

  ExampleLoss out;
  GraphAttentionRecord record;
  out.ldm = ldm_loss(tape, state.model.denoiser, state.model.schedule, latent, eps, t, context, &record);
  const auto columns = backend::token_columns(tokens);
  if (columns.empty()) {
    out.attn = tape.constant(Matrix::Zero(1, 1));
    return out;
  }
  std::vector<int> slots;
  for (const auto& [slot, col] : columns) slots.push_back(slot);
  const auto maps = collect_attention(record, cfg.attention_layers, columns);
  out.attn = attention_loss(maps, slots, masks, state.model.autoencoder.grid(), cfg.attention_loss);
  out.supervised = true;
  return out;
}

// ------------------------------------------------------------------ trainer

Trainer::Trainer(TrainState state, std::vector<TrainingExample> corpus, Options options)
    : state_(std::move(state)), corpus_(std::move(corpus)), options_(std::move(options)) {
  if (corpus_.empty()) throw InputError("training corpus is empty");
  state_.config.validate();
  const GridSize grid = state_.model.autoencoder.grid();
  for (const auto& ex : corpus_) {
    if (ex.masks.grid_h != grid.rows || ex.masks.grid_w != grid.cols) {
      throw InputError("masks of '" + ex.id + "' are not at the attention grid");
    }
    ex.composition.validate(state_.tokens.parts(), state_.tokens.variants());
    latents_.push_back(state_.model.autoencoder.encode(ex.image));
    TrainingExample mirror = flipped(ex);
    flipped_latents_.push_back(state_.model.autoencoder.encode(mirror.image));
    flipped_masks_.push_back(std::move(mirror.masks));
  }
  rng_.seed(state_.config.seed ^ 0x7261696eULL);
  order_.resize(corpus_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  snapshot();
}

int Trainer::steps_per_epoch() const {
  const std::size_t per_step =
      static_cast<std::size_t>(state_.config.batch_size) * static_cast<std::size_t>(state_.config.gradient_accumulation);
  return static_cast<int>((corpus_.size() + per_step - 1) / per_step);
}

long Trainer::total_steps() const {
  const long full = static_cast<long>(state_.config.epochs) * steps_per_epoch();
  return state_.config.max_steps > 0 ? std::min(full, state_.config.max_steps) : full;
}

std::vector<std::size_t> Trainer::next_batch() {
  std::vector<std::size_t> batch;
  while (static_cast<int>(batch.size()) < state_.config.batch_size) {
    if (cursor_ >= order_.size()) {
      if (!batch.empty()) break;
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
      ++epoch_;
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

void Trainer::snapshot() { last_good_ = state_.to_archive(); }

void Trainer::write_checkpoint(const std::string& name) {
  if (options_.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(options_.checkpoint_dir);
  const auto path = options_.checkpoint_dir / name;
  write_archive(last_good_, path);
  last_checkpoint_ = path;
}

StepLog Trainer::step() {
  const TrainingConfig& cfg = state_.config;
  auto params = state_.trainable();
  for (ad::Parameter* p : params) p->zero_grad();
  std::uniform_int_distribution<int> tdist(0, state_.model.schedule.steps() - 1);
  std::bernoulli_distribution flip(0.5);

  StepLog log;
  log.epoch = epoch_;
  ad::Tape tape;
  std::vector<ad::Var> ldms, attns;
  for (int micro = 0; micro < cfg.gradient_accumulation; ++micro) {
    for (std::size_t idx : next_batch()) {
      const bool flipped = cfg.horizontal_flip && flip(rng_);
      const int t = tdist(rng_);
      const Matrix& z0 = flipped ? flipped_latents_[idx] : latents_[idx];
      const Matrix eps = randn(z0.rows(), z0.cols(), rng_);
      const PartMaskSet& masks = flipped ? flipped_masks_[idx] : corpus_[idx].masks;
      ExampleLoss ex = example_loss(tape, state_, z0, corpus_[idx].composition, masks, t, eps);
      ldms.push_back(ex.ldm);
      if (ex.supervised) attns.push_back(ex.attn);
      ++log.effective_batch;
    }
  }
  ad::Var ldm = ad::average(ldms);
  ad::Var attn = attns.empty() ? tape.constant(Matrix::Zero(1, 1)) : ad::average(attns);
  ad::Var total = ad::add(ldm, ad::scale(attn, cfg.attention_lambda));
  log.supervised = static_cast<int>(attns.size());
  log.ldm = ldm.scalar();
  log.attn = attn.scalar();
  log.total = total.scalar();

  bool finite = std::isfinite(log.total) && std::isfinite(log.ldm) && std::isfinite(log.attn);
  if (finite) {
    tape.backward(total);
    finite = grads_finite(params);
  }
  if (!finite) {
    const long failed = state_.step + 1;
    state_ = TrainState::from_archive(last_good_);
    std::string where;
    if (!options_.checkpoint_dir.empty()) {
      write_checkpoint("last-good.ckpt");
      where = " (" + last_checkpoint_->string() + ")";
    }
    throw NumericError("non-finite loss at step " + std::to_string(failed) + "; restored last good state from step " +
                       std::to_string(state_.step) + where);
  }
  state_.optimizer.step(params);
  ++state_.step;
  log.step = state_.step;
  if (cfg.checkpoint_interval > 0 && state_.step % cfg.checkpoint_interval == 0) {
    snapshot();
    char name[32];
    std::snprintf(name, sizeof name, "step-%06ld.ckpt", state_.step);
    write_checkpoint(name);
  }
  if (options_.on_step) options_.on_step(log);
  return log;
}

std::vector<StepLog> Trainer::run() {
  std::vector<StepLog> logs;
  const long target = total_steps();
  while (state_.step < target) logs.push_back(step());
  return logs;
}

TrainState train(const backend::BaseModel& base, const PartDictionary& dict, std::vector<TrainingExample> corpus,
                 const TrainingConfig& config, Trainer::Options options) {
  if (!dict.hierarchy.fitted()) throw StateError("part dictionary holds no fitted hierarchy");
  Trainer trainer(init_train_state(base, dict.hierarchy.parts, dict.hierarchy.variants, config), std::move(corpus),
                  std::move(options));
  trainer.run();
  return std::move(trainer.state());
}

}  // namespace partcraft
