#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "egn/nn.hpp"
#include "egn/tensor.hpp"

namespace egn {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t backbone_heads = 4;
  std::size_t depth = 4;
  std::size_t eb_heads = 4;
  std::size_t eb_head_dim = 16;
  std::size_t eb_frequency = 2;
  std::size_t num_exemplars = 4;
  std::size_t num_genes = 16;
  std::size_t style_dim = 64;
  // MLP_z and MLP_h start at zero so every EB block starts as the identity.
  bool eb_zero_init = true;

  std::size_t num_patches() const;
  std::size_t num_eb_blocks() const { return eb_frequency ? depth / eb_frequency : 0; }
  std::vector<std::string> validate() const;
};

/// Full-scale preset: 224 px windows, P=32, 1024/4096, 16 heads, depth 8,
/// EB 8 heads x 64 every 2 blocks, k=9, D=256, M=250.
ModelConfig full_scale_model_config();

enum class Variant { kFull, kBackboneOnly, kWithoutEb, kWithoutProjector };

/// "full" | "backbone_only" | "without_eb" | "without_projector"; ConfigError otherwise.
Variant parse_variant(std::string_view name);
std::string variant_name(Variant variant);

// One batch. Exemplar rows are grouped per sample: row b*k + j is exemplar j
// of sample b.
struct ModelInput {
  Tensor images;            // B x 3 x S x S
  Tensor query_views;       // B x D
  Tensor exemplar_views;    // (B*k) x D
  Tensor exemplar_targets;  // (B*k) x M, normalized
  std::size_t batch() const { return images.dim(0); }
};

// h: B x D_m, r and s: (B*k) x D_m, z: (B*L) x D_m.
struct EgnState {
  Tensor h;
  Tensor r;
  Tensor s;
  Tensor z;
};

struct Stage1Result {
  Tensor h_hat;
  Tensor r;
  Tensor s;
  Tensor gates;  // sigmoid(MLP_m(...)), (B*k) x 2D_m
};

class EgnModel {
 public:
  EgnModel(const ModelConfig& config, Variant variant, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return variant_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// B x M predictions. Throws NumericError naming the first layer that
  /// produced a non-finite value.
  Tensor forward(const ModelInput& input) const;
  /// Same backbone, but predicts from [h0, AttPool(Z^T)] with every EB block
  /// skipped. Requires a variant with a projector.
  Tensor forward_without_eb(const ModelInput& input) const;

  // Building blocks, exposed for the per-stage contracts.
  Tensor patchify(const Tensor& images) const;     // (B*L) x 3P^2
  Tensor patch_embed(const Tensor& images) const;  // (B*L) x D_m
  /// Pre-norm self-attention and feed-forward, both residual. When
  /// `attention` is given it receives the (B*heads) x L x L weights.
  Tensor transformer_block(std::size_t index, const Tensor& z, Tensor* attention = nullptr) const;
  EgnState project_inputs(const ModelInput& input) const;
  Stage1Result eb_stage1(std::size_t block, const EgnState& state) const;
  /// Returns (h^{t+1}, Z^{t+1}).
  std::pair<Tensor, Tensor> eb_stage2(std::size_t block, const Tensor& h_hat, const Tensor& z) const;
  Tensor attention_pool(const Tensor& z, Tensor* weights = nullptr) const;  // B x D_m

  bool has_projector() const { return variant_ != Variant::kBackboneOnly; }
  bool has_eb() const { return variant_ == Variant::kFull || variant_ == Variant::kWithoutProjector; }

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear qkv, out, ffn1, ffn2;
  };
  struct EbBlock {
    Linear s, m1, m2, gate, o, z, h;
  };

  void check_input(const ModelInput& input) const;
  Tensor backbone(const Tensor& images, EgnState* state) const;
  Tensor project_h(const Tensor& views) const;

  ModelConfig config_;
  Variant variant_;
  std::uint64_t seed_;
  ParameterStore params_;
  Linear patch_;
  Tensor pos_;
  std::vector<Block> blocks_;
  Linear proj_h1_, proj_h2_, proj_r_, proj_s1_, proj_s2_;
  std::vector<EbBlock> eb_;
  Tensor pool_query_;
  Linear head_;
};

void save_model(const std::filesystem::path& path, const EgnModel& model);
EgnModel load_model(const std::filesystem::path& path);

}  // namespace egn
