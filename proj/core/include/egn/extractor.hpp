#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "egn/dataset.hpp"
#include "egn/matrix.hpp"
#include "egn/nn.hpp"
#include "egn/tensor.hpp"

namespace egn {

struct ExtractorConfig {
  std::size_t image_size = 32;  // power of two, at least 16
  std::size_t style_dim = 64;
  std::size_t base_channels = 16;
  std::size_t decoder_channels = 16;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  bool adversarial = false;
  double adversarial_weight = 0.1;

  /// Lists every violated constraint; empty when valid.
  std::vector<std::string> validate() const;
};

// e = E(X) together with its provenance.
struct GlobalView {
  std::vector<double> vector;
  std::uint64_t source_window_id = 0;
  std::uint64_t patient_id = 0;
};

// Convolutional encoder to a style vector, a style-modulated decoder back to
// the image, and an optional discriminator. Images are B x 3 x S x S.
class Extractor {
 public:
  Extractor(const ExtractorConfig& config, std::uint64_t seed);

  const ExtractorConfig& config() const { return config_; }

  Tensor encode_batch(const Tensor& images) const;  // -> B x D
  Tensor decode_batch(const Tensor& codes) const;   // -> B x 3 x S x S, in [0,1]
  Tensor discriminate(const Tensor& images) const;  // -> B

  std::vector<double> encode(std::span<const double> window) const;
  std::vector<double> decode(std::span<const double> view) const;
  GlobalView encode_window(const DatasetBundle& bundle, std::size_t index) const;

  // Decoder stage pieces, exposed for the per-channel modulation contract.
  std::size_t num_stages() const { return stages_.size(); }
  std::pair<Tensor, Tensor> modulation(std::size_t stage, const Tensor& codes) const;  // (scale, shift), B x C
  Tensor stage_forward(std::size_t stage, const Tensor& x, const Tensor& scale, const Tensor& shift) const;

  ParameterStore& generator_parameters() { return gen_; }
  const ParameterStore& generator_parameters() const { return gen_; }
  ParameterStore& discriminator_parameters() { return disc_; }
  const ParameterStore& discriminator_parameters() const { return disc_; }

 private:
  struct Conv {
    Linear linear;  // weight [k*k*Cin, Cout]
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;
    Tensor operator()(const Tensor& x) const;  // NHWC -> NHWC
  };
  struct Stage {
    Conv conv;
    Linear scale;
    Linear shift;
  };

  Conv make_conv(ParameterStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                 std::size_t stride, Rng& rng);
  void check_images(const Tensor& images) const;

  ExtractorConfig config_;
  ParameterStore gen_;
  ParameterStore disc_;
  std::vector<Conv> encoder_;
  Linear encoder_head_;
  Tensor seed_map_;  // 4 x 4 x C
  std::vector<Stage> stages_;
  Linear to_rgb_;
  std::vector<Conv> disc_convs_;
  Linear disc_head_;
};

/// Mean absolute deviation over all elements.
Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat);

struct AdversarialTerms {
  Tensor generator;      // mean softplus(-F(x_hat))
  Tensor discriminator;  // mean softplus(-F(x)) + softplus(F(x_hat))
};

/// Throws ContractError when the extractor has no discriminator.
AdversarialTerms adversarial_losses(const Tensor& x, const Tensor& x_hat, const Extractor& extractor);

struct ExtractorLogRow {
  std::size_t epoch = 0;
  double l1 = 0.0;
  double generator = 0.0;      // 0 when adversarial training is off
  double discriminator = 0.0;
};

/// Stacks the given windows into a B x 3 x S x S tensor.
Tensor window_batch(const DatasetBundle& bundle, std::span<const std::size_t> indices);

/// Trains on the listed windows (all windows when empty). Throws NumericError
/// naming the epoch and step of the first non-finite loss.
std::vector<ExtractorLogRow> train_extractor(Extractor& extractor, const DatasetBundle& bundle,
                                             std::span<const std::size_t> windows, std::uint64_t seed);

/// Mean L1 reconstruction error over the listed windows.
double mean_reconstruction_l1(const Extractor& extractor, const DatasetBundle& bundle,
                              std::span<const std::size_t> windows);

/// Global views of every window, N x D.
Matrix encode_bundle(const Extractor& extractor, const DatasetBundle& bundle);

void save_extractor(const std::filesystem::path& path, const Extractor& extractor, std::uint64_t seed);
Extractor load_extractor(const std::filesystem::path& path);

}  // namespace egn
