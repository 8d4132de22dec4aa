#include "partcraft/model.hpp"

#include "partcraft/error.hpp"
#include "partcraft/optim.hpp"
#include "partcraft/patch_basis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace partcraft::backend {

namespace {

ad::Parameter uniform_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng, double gain = 1.0) {
  const double a = gain / std::sqrt(static_cast<double>(rows));
  return ad::Parameter(name, rand_uniform(rows, cols, rng, -a, a), false);
}

ad::Parameter zero_param(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  return ad::Parameter(name, Matrix::Zero(rows, cols), false);
}

// Blocks borrow the ids of the SD-1.x 16x16 cross-attention layers (two in
// down_blocks.2, the rest in up_blocks.1) so the same layer list selects them.
std::string layer_name(int index, int count) {
  const int down = 2 * count / 5;
  if (index < down) return "down_blocks.2.attentions." + std::to_string(index) + ".transformer_blocks.0.attn2";
  return "up_blocks.1.attentions." + std::to_string(index - down) + ".transformer_blocks.0.attn2";
}

const char* lora_key(LoraTarget t) {
  switch (t) {
    case LoraTarget::Query: return "q";
    case LoraTarget::Key: return "k";
    case LoraTarget::Value: return "v";
    case LoraTarget::Out: return "out";
  }
  return "?";
}

}  // namespace

// ---------------------------------------------------------------- schedule

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  alphas_cumprod_.resize(static_cast<std::size_t>(steps));
  const double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double s = s0 + (s1 - s0) * t / (steps - 1);
    prod *= 1.0 - s * s;
    alphas_cumprod_[t] = prod;
  }
}

Matrix NoiseSchedule::add_noise(const Matrix& z0, const Matrix& eps, int t) const {
  const double ab = alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

// ------------------------------------------------------------- autoencoder

PatchAutoencoder::PatchAutoencoder(int image_side, int patch_size, double texture_scale)
    : image_side_(image_side), patch_size_(patch_size), texture_scale_(texture_scale) {
  if (patch_size < 2 || image_side % patch_size != 0) throw ConfigError("autoencoder side must be a multiple of the patch size");
}

Matrix PatchAutoencoder::encode(const Image& image) const {
  if (image.empty()) throw InputError("cannot encode an empty image");
  const Image& img = (image.width == image_side_ && image.height == image_side_) ? image : resize(image, image_side_, image_side_);
  static thread_local std::unique_ptr<PatchBasis> basis;
  if (!basis || basis->patch_size() != patch_size_) basis = std::make_unique<PatchBasis>(patch_size_);
  const GridSize g = grid();
  const int p = patch_size_;
  Matrix z(g.rows * g.cols, kChannels);
  for (int pr = 0; pr < g.rows; ++pr) {
    for (int pc = 0; pc < g.cols; ++pc) {
      double mean[3] = {0, 0, 0};
      double amp[3] = {0, 0, 0};
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          double lum = 0;
          for (int ch = 0; ch < 3; ++ch) {
            const double v = img.at(pc * p + c, pr * p + r, ch);
            mean[ch] += v;
            lum += v;
          }
          lum /= 3.0;
          for (int k = 0; k < 3; ++k) amp[k] += lum * basis->value(k, r, c);
        }
      }
      const int row = pr * g.cols + pc;
      for (int ch = 0; ch < 3; ++ch) z(row, ch) = (mean[ch] / (p * p) - 0.5) * 2.0;
      for (int k = 0; k < 3; ++k) z(row, 3 + k) = amp[k] / basis->squared_norm(k) / texture_scale_;
    }
  }
  return z;
}

Image PatchAutoencoder::decode(const Matrix& latent) const {
  const GridSize g = grid();
  if (latent.rows() != g.rows * g.cols || latent.cols() != kChannels) throw InputError("latent has the wrong shape");
  static thread_local std::unique_ptr<PatchBasis> basis;
  if (!basis || basis->patch_size() != patch_size_) basis = std::make_unique<PatchBasis>(patch_size_);
  const int p = patch_size_;
  Image img(image_side_, image_side_);
  for (int pr = 0; pr < g.rows; ++pr) {
    for (int pc = 0; pc < g.cols; ++pc) {
      const int row = pr * g.cols + pc;
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          double tex = 0;
          for (int k = 0; k < 3; ++k) tex += latent(row, 3 + k) * texture_scale_ * basis->value(k, r, c);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = latent(row, ch) / 2.0 + 0.5 + tex;
            img.at(pc * p + c, pr * p + r, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------- denoiser

LoraTarget lora_target_from_string(const std::string& text) {
  if (text == "q" || text == "to_q" || text == "query") return LoraTarget::Query;
  if (text == "k" || text == "to_k" || text == "key") return LoraTarget::Key;
  if (text == "v" || text == "to_v" || text == "value") return LoraTarget::Value;
  if (text == "out" || text == "to_out" || text == "o") return LoraTarget::Out;
  throw ConfigError("unknown LoRA target '" + text + "'");
}

const char* to_string(LoraTarget target) { return lora_key(target); }

ToyDenoiser::ToyDenoiser(const DenoiserConfig& config, Rng& rng) : config_(config) {
  const int d = config.model_dim, inner = config.heads * config.head_dim, n = config.grid.rows * config.grid.cols;
  if (d < 1 || inner < 1 || config.blocks < 1 || n < 1) throw ConfigError("denoiser dimensions must be positive");
  w_in_ = uniform_param("denoiser.w_in", config.latent_channels, d, rng);
  b_in_ = zero_param("denoiser.b_in", 1, d);
  pos_ = ad::Parameter("denoiser.pos", randn(n, d, rng, 0.1), false);
  time_w1_ = uniform_param("denoiser.time_w1", config.time_dim, d, rng);
  time_b1_ = zero_param("denoiser.time_b1", 1, d);
  time_w2_ = uniform_param("denoiser.time_w2", d, d, rng);
  time_b2_ = zero_param("denoiser.time_b2", 1, d);
  for (int i = 0; i < config.blocks; ++i) {
    Layer l;
    l.id = layer_name(i, config.blocks);
    const std::string p = "denoiser.layers." + std::to_string(i) + ".";
    l.wq = uniform_param(p + "wq", d, inner, rng);
    l.wk = uniform_param(p + "wk", config.context_dim, inner, rng);
    l.wv = uniform_param(p + "wv", config.context_dim, inner, rng);
    l.wo = uniform_param(p + "wo", inner, d, rng, 0.5);
    l.bo = zero_param(p + "bo", 1, d);
    l.mlp_w1 = uniform_param(p + "mlp_w1", d, config.mlp_dim, rng);
    l.mlp_b1 = zero_param(p + "mlp_b1", 1, config.mlp_dim);
    l.mlp_w2 = uniform_param(p + "mlp_w2", config.mlp_dim, d, rng, 0.5);
    l.mlp_b2 = zero_param(p + "mlp_b2", 1, d);
    layers_.push_back(std::move(l));
  }
  w_out_ = uniform_param("denoiser.w_out", d, config.latent_channels, rng, 0.5);
  b_out_ = zero_param("denoiser.b_out", 1, config.latent_channels);
}

std::vector<std::string> ToyDenoiser::attention_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers_) out.push_back(l.id);
  return out;
}

Matrix ToyDenoiser::time_features(int t) const {
  const int half = config_.time_dim / 2;
  Matrix f(1, config_.time_dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    f(0, i) = std::sin(t * freq);
    f(0, half + i) = std::cos(t * freq);
  }
  return f;
}

ad::Var ToyDenoiser::project(ad::Tape& tape, ad::Var x, ad::Parameter& w, Layer& layer, LoraTarget target) {
  ad::Var y = ad::matmul(x, tape.param(w));
  auto it = layer.lora.find(target);
  if (it == layer.lora.end()) return y;
  LoraAdapter& a = it->second;
  ad::Var delta = ad::matmul(ad::matmul(x, tape.param(a.down)), tape.param(a.up));
  return ad::add(y, ad::scale(delta, a.scale));
}

DenoiserOutput ToyDenoiser::forward(ad::Tape& tape, ad::Var z_t, int t, ad::Var context) {
  const int n = config_.grid.rows * config_.grid.cols;
  if (z_t.rows() != n || z_t.cols() != config_.latent_channels) throw InputError("latent shape does not match the denoiser");
  if (context.cols() != config_.context_dim) throw InputError("context width does not match the denoiser");
  DenoiserOutput out;
  ad::Var temb = ad::relu(ad::add_row(ad::matmul(tape.constant(time_features(t)), tape.param(time_w1_)), tape.param(time_b1_)));
  temb = ad::add_row(ad::matmul(temb, tape.param(time_w2_)), tape.param(time_b2_));
  ad::Var h = ad::add_row(ad::matmul(z_t, tape.param(w_in_)), tape.param(b_in_));
  h = ad::add_row(ad::add(h, tape.param(pos_)), temb);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config_.head_dim));
  for (auto& layer : layers_) {
    ad::Var q = project(tape, h, layer.wq, layer, LoraTarget::Query);
    ad::Var k = project(tape, context, layer.wk, layer, LoraTarget::Key);
    ad::Var v = project(tape, context, layer.wv, layer, LoraTarget::Value);
    std::vector<ad::Var> head_outputs;
    auto& probs = out.attention.layers[layer.id];
    for (int hd = 0; hd < config_.heads; ++hd) {
      const Eigen::Index off = static_cast<Eigen::Index>(hd) * config_.head_dim;
      ad::Var qh = ad::slice_cols(q, off, config_.head_dim);
      ad::Var kh = ad::slice_cols(k, off, config_.head_dim);
      ad::Var vh = ad::slice_cols(v, off, config_.head_dim);
      ad::Var p = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
      probs.push_back(p);
      head_outputs.push_back(ad::matmul(p, vh));
    }
    ad::Var attn = head_outputs.size() == 1 ? head_outputs.front() : ad::concat_cols(head_outputs);
    attn = ad::add_row(project(tape, attn, layer.wo, layer, LoraTarget::Out), tape.param(layer.bo));
    h = ad::add(h, attn);
    ad::Var m = ad::relu(ad::add_row(ad::matmul(h, tape.param(layer.mlp_w1)), tape.param(layer.mlp_b1)));
    m = ad::add_row(ad::matmul(m, tape.param(layer.mlp_w2)), tape.param(layer.mlp_b2));
    h = ad::add(h, m);
  }
  out.eps = ad::add_row(ad::matmul(h, tape.param(w_out_)), tape.param(b_out_));
  return out;
}

void ToyDenoiser::add_lora(int rank, const std::vector<LoraTarget>& targets, double alpha, Rng& rng) {
  if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (targets.empty()) throw ConfigError("LoRA needs at least one target");
  lora_rank_ = rank;
  lora_alpha_ = alpha;
  lora_targets_ = targets;
  const int d = config_.model_dim, inner = config_.heads * config_.head_dim;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    l.lora.clear();
    for (LoraTarget t : targets) {
      int in = 0, out = 0;
      switch (t) {
        case LoraTarget::Query: in = d; out = inner; break;
        case LoraTarget::Key:
        case LoraTarget::Value: in = config_.context_dim; out = inner; break;
        case LoraTarget::Out: in = inner; out = d; break;
      }
      const std::string p = "lora.layers." + std::to_string(i) + "." + lora_key(t) + ".";
      LoraAdapter a;
      a.down = ad::Parameter(p + "down", randn(in, rank, rng, 1.0 / rank), true);
      a.up = ad::Parameter(p + "up", Matrix::Zero(rank, out), true);
      a.scale = alpha / rank;
      l.lora[t] = std::move(a);
    }
  }
}

std::vector<ad::Parameter*> ToyDenoiser::base_parameters() {
  std::vector<ad::Parameter*> out = {&w_in_, &b_in_, &pos_, &time_w1_, &time_b1_, &time_w2_, &time_b2_, &w_out_, &b_out_};
  for (auto& l : layers_) {
    for (ad::Parameter* p : {&l.wq, &l.wk, &l.wv, &l.wo, &l.bo, &l.mlp_w1, &l.mlp_b1, &l.mlp_w2, &l.mlp_b2}) out.push_back(p);
  }
  return out;
}

std::vector<ad::Parameter*> ToyDenoiser::lora_parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& l : layers_) {
    for (auto& [t, a] : l.lora) {
      out.push_back(&a.down);
      out.push_back(&a.up);
    }
  }
  return out;
}

void ToyDenoiser::set_base_trainable(bool trainable) {
  for (ad::Parameter* p : base_parameters()) p->trainable = trainable;
}

void ToyDenoiser::write(Archive& archive, const std::string& prefix, bool include_lora) const {
  auto& self = const_cast<ToyDenoiser&>(*this);
  nlohmann::json meta = {{"latent_channels", config_.latent_channels},
                         {"grid", {config_.grid.rows, config_.grid.cols}},
                         {"model_dim", config_.model_dim},
                         {"heads", config_.heads},
                         {"head_dim", config_.head_dim},
                         {"blocks", config_.blocks},
                         {"mlp_dim", config_.mlp_dim},
                         {"context_dim", config_.context_dim},
                         {"time_dim", config_.time_dim}};
  archive.meta[prefix + "config"] = meta;
  for (ad::Parameter* p : self.base_parameters()) archive.tensors[prefix + p->name] = p->value;
  if (include_lora && lora_rank_ > 0) {
    nlohmann::json targets = nlohmann::json::array();
    for (LoraTarget t : lora_targets_) targets.push_back(lora_key(t));
    archive.meta[prefix + "lora"] = {{"rank", lora_rank_}, {"alpha", lora_alpha_}, {"targets", targets}};
    for (ad::Parameter* p : self.lora_parameters()) archive.tensors[prefix + p->name] = p->value;
  }
}

ToyDenoiser ToyDenoiser::read(const Archive& archive, const std::string& prefix) {
  const auto& meta = archive.meta.at(prefix + "config");
  DenoiserConfig c;
  c.latent_channels = meta.at("latent_channels").get<int>();
  c.grid = {meta.at("grid").at(0).get<int>(), meta.at("grid").at(1).get<int>()};
  c.model_dim = meta.at("model_dim").get<int>();
  c.heads = meta.at("heads").get<int>();
  c.head_dim = meta.at("head_dim").get<int>();
  c.blocks = meta.at("blocks").get<int>();
  c.mlp_dim = meta.at("mlp_dim").get<int>();
  c.context_dim = meta.at("context_dim").get<int>();
  c.time_dim = meta.at("time_dim").get<int>();
  Rng scratch(0);
  ToyDenoiser d(c, scratch);
  for (ad::Parameter* p : d.base_parameters()) {
    Matrix v = archive.tensor(prefix + p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) throw InputError("denoiser tensor '" + p->name + "' has the wrong shape");
    p->value = std::move(v);
    p->zero_grad();
  }
  return d;
}

void ToyDenoiser::read_lora(const Archive& archive, const std::string& prefix) {
  auto key = prefix + "lora";
  if (!archive.meta.contains(key)) throw InputError("archive holds no LoRA adapters");
  const auto& meta = archive.meta.at(key);
  std::vector<LoraTarget> targets;
  for (const auto& t : meta.at("targets")) targets.push_back(lora_target_from_string(t.get<std::string>()));
  Rng scratch(0);
  add_lora(meta.at("rank").get<int>(), targets, meta.at("alpha").get<double>(), scratch);
  for (ad::Parameter* p : lora_parameters()) {
    Matrix v = archive.tensor(prefix + p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) throw InputError("LoRA tensor '" + p->name + "' has the wrong shape");
    p->value = std::move(v);
    p->zero_grad();
  }
}

// ------------------------------------------------------------ text encoder

TextEncoder::TextEncoder(int dim, Rng& rng) {
  word_embeddings_ = ad::Parameter("text.word_embeddings", randn(vocab_.size(), dim, rng, 1.0), false);
  w1_ = uniform_param("text.w1", dim, dim, rng);
  b1_ = zero_param("text.b1", 1, dim);
  w2_ = uniform_param("text.w2", dim, dim, rng, 0.5);
  b2_ = zero_param("text.b2", 1, dim);
}

ad::Var TextEncoder::encode(ad::Tape& tape, const TokenSequence& tokens, ad::Var part_rows) {
  std::vector<int> word_ids = {Vocabulary::kBos};
  std::vector<int> part_positions;
  int parts_seen = 0;
  for (const auto& t : tokens) {
    if (t.kind == Token::Kind::Part) {
      ++parts_seen;
      word_ids.push_back(-1);
    } else {
      word_ids.push_back(t.word_id);
    }
  }
  if (parts_seen > 0 && (!part_rows.valid() || part_rows.rows() != parts_seen)) {
    throw InternalError("prompt has " + std::to_string(parts_seen) + " part tokens but the condition supplies a different count");
  }
  ad::Var table = tape.param(word_embeddings_);
  std::vector<ad::Var> rows;
  int next_part = 0;
  for (int id : word_ids) {
    if (id >= 0) {
      rows.push_back(ad::select_rows(table, {id}));
    } else {
      rows.push_back(ad::select_rows(part_rows, {next_part++}));
    }
  }
  ad::Var x = ad::concat_rows(rows);
  ad::Var hidden = ad::tanh(ad::add_row(ad::matmul(x, tape.param(w1_)), tape.param(b1_)));
  return ad::add(x, ad::add_row(ad::matmul(hidden, tape.param(w2_)), tape.param(b2_)));
}

ad::Var TextEncoder::encode(ad::Tape& tape, const TokenSequence& tokens) { return encode(tape, tokens, ad::Var{}); }

std::vector<ad::Parameter*> TextEncoder::parameters() { return {&word_embeddings_, &w1_, &b1_, &w2_, &b2_}; }

void TextEncoder::write(Archive& archive, const std::string& prefix) const {
  auto& self = const_cast<TextEncoder&>(*this);
  for (ad::Parameter* p : self.parameters()) archive.tensors[prefix + p->name] = p->value;
}

TextEncoder TextEncoder::read(const Archive& archive, const std::string& prefix) {
  TextEncoder e;
  const std::vector<std::pair<ad::Parameter*, const char*>> slots = {{&e.word_embeddings_, "text.word_embeddings"},
                                                                     {&e.w1_, "text.w1"},
                                                                     {&e.b1_, "text.b1"},
                                                                     {&e.w2_, "text.w2"},
                                                                     {&e.b2_, "text.b2"}};
  for (const auto& [p, name] : slots) *p = ad::Parameter(name, archive.tensor(prefix + name), false);
  if (e.word_embeddings_.value.rows() != e.vocab_.size()) throw InputError("text encoder vocabulary size mismatch");
  return e;
}

std::map<int, int> token_columns(const TokenSequence& tokens) {
  std::map<int, int> cols;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].kind == Token::Kind::Part) cols[tokens[i].code.slot] = static_cast<int>(i) + 1;
  }
  return cols;
}

// -------------------------------------------------------------- base model

BaseModel BaseModel::create(const BaseModelConfig& config) {
  Rng rng(config.seed);
  BaseModel m;
  m.config = config;
  m.config.denoiser.grid = {config.image_side / config.patch_size, config.image_side / config.patch_size};
  m.config.denoiser.context_dim = config.text_dim;
  m.config.denoiser.latent_channels = PatchAutoencoder::kChannels;
  m.schedule = NoiseSchedule(config.train_timesteps);
  m.autoencoder = PatchAutoencoder(config.image_side, config.patch_size, config.texture_scale);
  m.text_encoder = TextEncoder(config.text_dim, rng);
  m.denoiser = ToyDenoiser(m.config.denoiser, rng);
  return m;
}

std::vector<ad::Parameter*> BaseModel::frozen_parameters() {
  std::vector<ad::Parameter*> out = text_encoder.parameters();
  for (ad::Parameter* p : denoiser.base_parameters()) out.push_back(p);
  return out;
}

void BaseModel::write(Archive& archive, bool include_lora) const {
  archive.meta["base"] = {{"schema", kSchema},
                          {"version", kVersion},
                          {"image_side", config.image_side},
                          {"patch_size", config.patch_size},
                          {"texture_scale", config.texture_scale},
                          {"train_timesteps", config.train_timesteps},
                          {"text_dim", config.text_dim},
                          {"seed", config.seed}};
  text_encoder.write(archive, "base.");
  denoiser.write(archive, "base.", include_lora);
}

BaseModel BaseModel::read(const Archive& archive) {
  if (!archive.meta.contains("base")) throw InputError("archive holds no base model");
  const auto& meta = archive.meta.at("base");
  if (meta.value("schema", "") != kSchema || meta.value("version", 0) != kVersion) throw InputError("unsupported base model");
  BaseModel m;
  m.config.image_side = meta.at("image_side").get<int>();
  m.config.patch_size = meta.at("patch_size").get<int>();
  m.config.texture_scale = meta.at("texture_scale").get<double>();
  m.config.train_timesteps = meta.at("train_timesteps").get<int>();
  m.config.text_dim = meta.at("text_dim").get<int>();
  m.config.seed = meta.at("seed").get<std::uint64_t>();
  m.schedule = NoiseSchedule(m.config.train_timesteps);
  m.autoencoder = PatchAutoencoder(m.config.image_side, m.config.patch_size, m.config.texture_scale);
  m.text_encoder = TextEncoder::read(archive, "base.");
  m.denoiser = ToyDenoiser::read(archive, "base.");
  m.config.denoiser = m.denoiser.config();
  return m;
}

void BaseModel::save(const std::filesystem::path& path) const {
  Archive a;
  write(a, false);
  write_archive(a, path);
}

BaseModel BaseModel::load(const std::filesystem::path& path) { return read(read_archive(path)); }

double pretrain_base(BaseModel& model, const std::vector<Matrix>& latents, const PretrainConfig& config) {
  if (latents.empty()) throw InputError("pretraining needs at least one latent");
  Rng rng(config.seed);
  model.denoiser.set_base_trainable(true);
  auto params = model.denoiser.base_parameters();
  AdamW::Options o;
  o.learning_rate = config.learning_rate;
  o.weight_decay = 0.0;
  AdamW opt(o);
  const TokenSequence prompt = tokenize(config.prompt, model.text_encoder.vocabulary());
  const TokenSequence empty;
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
  std::uniform_int_distribution<int> tdist(0, model.schedule.steps() - 1);
  std::bernoulli_distribution drop(config.condition_dropout);
  double running = 0.0;
  for (int step = 0; step < config.steps; ++step) {
    for (ad::Parameter* p : params) p->zero_grad();
    ad::Tape tape;
    std::vector<ad::Var> losses;
    for (int b = 0; b < config.batch_size; ++b) {
      const Matrix& z0 = latents[pick(rng)];
      const int t = tdist(rng);
      Matrix eps = randn(z0.rows(), z0.cols(), rng);
      ad::Var ctx = model.text_encoder.encode(tape, drop(rng) ? empty : prompt);
      auto out = model.denoiser.forward(tape, tape.constant(model.schedule.add_noise(z0, eps, t)), t, ctx);
      losses.push_back(ad::mse(out.eps, tape.constant(eps)));
    }
    ad::Var loss = ad::average(losses);
    tape.backward(loss);
    opt.step(params);
    running = step == 0 ? loss.scalar() : 0.98 * running + 0.02 * loss.scalar();
  }
  model.denoiser.set_base_trainable(false);
  return running;
}

}  // namespace partcraft::backend
