#pragma once

#include "partcraft/archive.hpp"
#include "partcraft/autodiff.hpp"
#include "partcraft/parts.hpp"

#include <filesystem>
#include <vector>

namespace partcraft {

enum class BottleneckMode { Bottleneck, Identity };

const char* to_string(BottleneckMode mode);
BottleneckMode bottleneck_mode_from_string(const std::string& text);

/// Learnable pseudo-word embeddings e ((M+1)K x D) and the projector
/// f(x) = relu(x W1 + b1) W2 + b2 producing the conditioned embeddings.
/// In identity mode f is skipped and the raw rows are returned unchanged.
class TokenTable {
 public:
  static constexpr const char* kSchema = "partcraft.token-table";
  static constexpr int kVersion = 1;

  TokenTable() = default;

  /// Rows start at `anchor` plus N(0, noise^2); projector weights use
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static TokenTable create(int parts, int variants, const RowVector& anchor, int hidden, BottleneckMode mode,
                           double noise, Rng& rng);

  int parts() const { return parts_; }
  int variants() const { return variants_; }
  int dim() const { return static_cast<int>(embeddings.value.cols()); }
  int hidden() const { return static_cast<int>(w1.value.cols()); }
  int rows() const { return (parts_ + 1) * variants_; }
  BottleneckMode mode() const { return mode_; }

  /// slot * K + (variant - 1); throws InputError for absent or out-of-range codes.
  int row(const PartCode& code) const;
  PartCode code_of_row(int row) const;

  std::vector<ad::Parameter*> parameters();
  void set_trainable(bool trainable);

  /// Conditioned embeddings for the present codes, one row each, in slot order.
  ad::Var embed(ad::Tape& tape, const PartComposition& composition);
  /// Applies f to arbitrary rows already on the tape.
  ad::Var project(ad::Tape& tape, ad::Var raw);

  Archive to_archive(const std::string& prefix = "token.") const;
  static TokenTable from_archive(const Archive& archive, const std::string& prefix = "token.");
  void save(const std::filesystem::path& path) const;
  static TokenTable load(const std::filesystem::path& path);

  ad::Parameter embeddings;
  ad::Parameter w1, b1, w2, b2;

 private:
  int parts_ = 0;
  int variants_ = 0;
  BottleneckMode mode_ = BottleneckMode::Bottleneck;
};

/// y_p = f(e(p)) for each present code; absent codes are skipped.
std::vector<RowVector> embed_tokens(const PartComposition& composition, TokenTable& table);

}  // namespace partcraft
