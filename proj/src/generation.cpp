#include "partcraft/generation.hpp"

#include "partcraft/error.hpp"

#include <cmath>

namespace partcraft {

using nlohmann::json;

namespace {

json composition_json(const PartComposition& c) {
  json codes = json::array();
  for (const auto& code : c.codes) codes.push_back(code.absent() ? json(nullptr) : json(code.variant));
  return codes;
}

PartComposition composition_from_json(const json& j) {
  PartComposition c;
  int slot = 0;
  for (const auto& v : j) c.codes.push_back({slot++, v.is_null() ? PartCode::kAbsent : v.get<int>()});
  return c;
}

}  // namespace

json to_json(const Provenance& p) {
  return {{"schema", Provenance::kSchema},
          {"version", Provenance::kVersion},
          {"composition", composition_json(p.composition)},
          {"compose", format_composition(p.composition)},
          {"style", p.style_suffix},
          {"seed", p.seed},
          {"steps", p.steps},
          {"guidance", p.guidance},
          {"checkpoint", p.checkpoint_id},
          {"template", p.template_text},
          {"prompt", p.prompt}};
}

Provenance provenance_from_json(const json& j) {
  if (j.value("schema", "") != Provenance::kSchema || j.value("version", 0) != Provenance::kVersion) {
    throw InputError("unsupported provenance record");
  }
  Provenance p;
  p.composition = composition_from_json(j.at("composition"));
  p.style_suffix = j.at("style").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.steps = j.at("steps").get<int>();
  p.guidance = j.at("guidance").get<double>();
  p.checkpoint_id = j.at("checkpoint").get<std::string>();
  p.template_text = j.at("template").get<std::string>();
  p.prompt = j.at("prompt").get<std::string>();
  return p;
}

TokenSequence request_tokens(const GenerationRequest& request, const std::string& template_text,
                             const Vocabulary& vocab, int parts, int variants) {
  PromptSpec spec;
  spec.template_text = template_text;
  spec.composition = request.composition;
  spec.style_suffix = request.style_suffix;
  return render_prompt(spec, vocab, parts, variants);
}

std::vector<int> ddim_timesteps(int steps, int train_steps) {
  if (steps < 1 || steps > train_steps) throw InputError("sampler steps must be in [1, " + std::to_string(train_steps) + "]");
  std::vector<int> out;
  for (int i = 0; i < steps; ++i) out.push_back((steps - i) * train_steps / steps - 1);
  return out;
}

Matrix ddim_step(const Matrix& z, const Matrix& eps, double alpha_bar, double alpha_bar_prev) {
  const Matrix z0 = (z - std::sqrt(1.0 - alpha_bar) * eps) / std::sqrt(alpha_bar);
  return std::sqrt(alpha_bar_prev) * z0 + std::sqrt(1.0 - alpha_bar_prev) * eps;
}

DiffusionGenerator::DiffusionGenerator(std::shared_ptr<const TrainState> state) : state_(std::move(state)) {
  if (!state_) throw StateError("generator needs a trained state");
  checkpoint_id_ = state_->checkpoint_id();
}

GenerationResult DiffusionGenerator::generate(const GenerationRequest& request) const {
  if (request.steps < 1) throw InputError("steps must be >= 1");
  if (!std::isfinite(request.guidance)) throw InputError("guidance must be finite");
  request.composition.validate(parts(), variants());
  // Forward passes only read parameters; the casts let them bind to a tape.
  auto& state = const_cast<TrainState&>(*state_);
  const TokenSequence tokens = request_tokens(request, state.config.prompt_template,
                                              state.model.text_encoder.vocabulary(), parts(), variants());
  const auto& schedule = state.model.schedule;
  const int train_steps = schedule.steps();
  const int steps = std::min(request.steps, train_steps);
  const GridSize grid = state.model.autoencoder.grid();
  const std::vector<int> schedule_t = ddim_timesteps(steps, train_steps);

  Rng rng(request.seed);
  Matrix z = randn(grid.rows * grid.cols, backend::PatchAutoencoder::kChannels, rng);
  try {
    ad::Tape tape;
    tape.set_grad_enabled(false);
    ad::Var part_rows;
    if (request.composition.present_count() > 0) part_rows = state.tokens.embed(tape, request.composition);
    ad::Var cond = state.model.text_encoder.encode(tape, tokens, part_rows);
    ad::Var uncond = state.model.text_encoder.encode(tape, TokenSequence{});
    for (int i = 0; i < steps; ++i) {
      const int t = schedule_t[i];
      const int prev = i + 1 < steps ? schedule_t[i + 1] : -1;
      ad::Tape step_tape;
      step_tape.set_grad_enabled(false);
      ad::Var zt = step_tape.constant(z);
      Matrix eps = state.model.denoiser.forward(step_tape, zt, t, step_tape.constant(cond.value())).eps.value();
      if (request.guidance != 1.0) {
        const Matrix eps_u =
            state.model.denoiser.forward(step_tape, zt, t, step_tape.constant(uncond.value())).eps.value();
        eps = eps_u + request.guidance * (eps - eps_u);
      }
      z = ddim_step(z, eps, schedule.alpha_bar(t), prev >= 0 ? schedule.alpha_bar(prev) : 1.0);
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(std::string("sampling failed: ") + e.what());
  }
  if (!z.allFinite()) throw BackendError("sampling produced non-finite latents");

  GenerationResult out;
  out.image = state.model.autoencoder.decode(z);
  out.provenance.composition = request.composition;
  out.provenance.style_suffix = request.style_suffix;
  out.provenance.seed = request.seed;
  out.provenance.steps = request.steps;
  out.provenance.guidance = request.guidance;
  out.provenance.checkpoint_id = checkpoint_id_;
  out.provenance.template_text = state.config.prompt_template;
  out.provenance.prompt = to_string(tokens);
  return out;
}

PartComposition swap_part(const PartComposition& base, int slot, const PartComposition& donor) {
  if (base.slot_count() != donor.slot_count()) throw InputError("donor has a different slot count");
  if (slot < 0 || slot >= base.slot_count()) throw InputError("slot " + std::to_string(slot) + " out of range");
  if (donor.codes[slot].absent()) throw InputError("donor slot " + std::to_string(slot) + " is absent");
  PartComposition out = base;
  out.codes[slot] = donor.codes[slot];
  return out;
}

}  // namespace partcraft
