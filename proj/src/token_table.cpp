#include "partcraft/token_table.hpp"

#include "partcraft/error.hpp"

#include <cmath>

namespace partcraft {

const char* to_string(BottleneckMode mode) {
  return mode == BottleneckMode::Identity ? "identity" : "bottleneck";
}

BottleneckMode bottleneck_mode_from_string(const std::string& text) {
  if (text == "identity") return BottleneckMode::Identity;
  if (text == "bottleneck") return BottleneckMode::Bottleneck;
  throw ConfigError("unknown bottleneck mode '" + text + "'");
}

TokenTable TokenTable::create(int parts, int variants, const RowVector& anchor, int hidden, BottleneckMode mode,
                              double noise, Rng& rng) {
  if (parts < 1 || variants < 1 || anchor.size() < 1 || hidden < 1) throw ConfigError("token table needs M, K, D, D_h >= 1");
  TokenTable t;
  t.parts_ = parts;
  t.variants_ = variants;
  t.mode_ = mode;
  const Eigen::Index d = anchor.size();
  Matrix e = randn((parts + 1) * variants, d, rng, noise);
  e.rowwise() += anchor;
  t.embeddings = ad::Parameter("token.embeddings", std::move(e), true);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  t.w1 = ad::Parameter("token.w1", rand_uniform(d, hidden, rng, -a1, a1), true);
  t.b1 = ad::Parameter("token.b1", rand_uniform(1, hidden, rng, -a1, a1), true);
  t.w2 = ad::Parameter("token.w2", rand_uniform(hidden, d, rng, -a2, a2), true);
  t.b2 = ad::Parameter("token.b2", rand_uniform(1, d, rng, -a2, a2), true);
  return t;
}

int TokenTable::row(const PartCode& code) const {
  if (code.absent()) throw InputError("absent code has no token row");
  if (code.slot < 0 || code.slot > parts_ || code.variant < 1 || code.variant > variants_) {
    throw InputError("code (" + std::to_string(code.slot) + "," + std::to_string(code.variant) + ") out of range");
  }
  return code.slot * variants_ + (code.variant - 1);
}

PartCode TokenTable::code_of_row(int r) const {
  if (r < 0 || r >= rows()) throw InputError("token row out of range");
  return {r / variants_, r % variants_ + 1};
}

std::vector<ad::Parameter*> TokenTable::parameters() {
  if (mode_ == BottleneckMode::Identity) return {&embeddings};
  return {&embeddings, &w1, &b1, &w2, &b2};
}

void TokenTable::set_trainable(bool trainable) {
  for (ad::Parameter* p : {&embeddings, &w1, &b1, &w2, &b2}) p->trainable = trainable;
}

ad::Var TokenTable::project(ad::Tape& tape, ad::Var raw) {
  if (mode_ == BottleneckMode::Identity) return raw;
  ad::Var h = ad::relu(ad::add_row(ad::matmul(raw, tape.param(w1)), tape.param(b1)));
  return ad::add_row(ad::matmul(h, tape.param(w2)), tape.param(b2));
}

ad::Var TokenTable::embed(ad::Tape& tape, const PartComposition& composition) {
  composition.validate(parts_, variants_);
  std::vector<int> rows_idx;
  for (const auto& c : composition.codes)
    if (!c.absent()) rows_idx.push_back(row(c));
  if (rows_idx.empty()) throw InputError("composition has no present codes");
  return project(tape, ad::select_rows(tape.param(embeddings), rows_idx));
}

std::vector<RowVector> embed_tokens(const PartComposition& composition, TokenTable& table) {
  if (composition.present_count() == 0) return {};
  ad::Tape tape;
  const Matrix& y = table.embed(tape, composition).value();
  std::vector<RowVector> out;
  for (Eigen::Index r = 0; r < y.rows(); ++r) out.push_back(y.row(r));
  return out;
}

Archive TokenTable::to_archive(const std::string& prefix) const {
  Archive a;
  a.meta = {{"schema", kSchema},
            {"version", kVersion},
            {"parts", parts_},
            {"variants", variants_},
            {"dim", embeddings.value.cols()},
            {"hidden", w1.value.cols()},
            {"mode", to_string(mode_)}};
  a.tensors[prefix + "embeddings"] = embeddings.value;
  a.tensors[prefix + "w1"] = w1.value;
  a.tensors[prefix + "b1"] = b1.value;
  a.tensors[prefix + "w2"] = w2.value;
  a.tensors[prefix + "b2"] = b2.value;
  return a;
}

TokenTable TokenTable::from_archive(const Archive& archive, const std::string& prefix) {
  const auto& meta = archive.meta.contains("token_table") ? archive.meta.at("token_table") : archive.meta;
  if (meta.value("schema", "") != kSchema || meta.value("version", 0) != kVersion) {
    throw InputError("archive does not hold a supported token table");
  }
  TokenTable t;
  t.parts_ = meta.at("parts").get<int>();
  t.variants_ = meta.at("variants").get<int>();
  t.mode_ = bottleneck_mode_from_string(meta.at("mode").get<std::string>());
  t.embeddings = ad::Parameter("token.embeddings", archive.tensor(prefix + "embeddings"), true);
  t.w1 = ad::Parameter("token.w1", archive.tensor(prefix + "w1"), true);
  t.b1 = ad::Parameter("token.b1", archive.tensor(prefix + "b1"), true);
  t.w2 = ad::Parameter("token.w2", archive.tensor(prefix + "w2"), true);
  t.b2 = ad::Parameter("token.b2", archive.tensor(prefix + "b2"), true);
  const int d = t.dim(), h = t.hidden();
  if (t.embeddings.value.rows() != t.rows() || meta.at("dim").get<int>() != d || meta.at("hidden").get<int>() != h ||
      t.w2.value.rows() != h || t.w2.value.cols() != d || t.b1.value.cols() != h || t.b2.value.cols() != d) {
    throw InputError("token table tensors disagree with its header");
  }
  if (!t.embeddings.value.allFinite()) throw InputError("token table has non-finite embeddings");
  return t;
}

void TokenTable::save(const std::filesystem::path& path) const { write_archive(to_archive(), path); }

TokenTable TokenTable::load(const std::filesystem::path& path) { return from_archive(read_archive(path)); }

}  // namespace partcraft
