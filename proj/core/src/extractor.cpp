#include "egn/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "config_visit.hpp"
#include "egn/checkpoint.hpp"
#include "egn/error.hpp"
#include "egn/optim.hpp"

namespace egn {

namespace {

constexpr std::size_t kSeedSide = 4;
constexpr std::size_t kEncoderStages = 4;

bool is_power_of_two(std::size_t v) { return v && !(v & (v - 1)); }

}  // namespace

std::vector<std::string> ExtractorConfig::validate() const {
  std::vector<std::string> errors;
  if (image_size < 16 || !is_power_of_two(image_size)) errors.push_back("extractor.image_size must be a power of two >= 16");
  if (style_dim == 0) errors.push_back("extractor.style_dim must be positive");
  if (base_channels == 0) errors.push_back("extractor.base_channels must be positive");
  if (decoder_channels == 0) errors.push_back("extractor.decoder_channels must be positive");
  if (epochs == 0) errors.push_back("extractor.epochs must be positive");
  if (batch_size == 0) errors.push_back("extractor.batch_size must be positive");
  if (!(lr > 0.0)) errors.push_back("extractor.lr must be positive");
  if (!(adversarial_weight >= 0.0)) errors.push_back("extractor.adversarial_weight must be nonnegative");
  return errors;
}

Tensor Extractor::Conv::operator()(const Tensor& x) const {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  return reshape(linear(im2col(x, kernel, stride, pad)), {b, ho, wo, linear.out_features()});
}

Extractor::Conv Extractor::make_conv(ParameterStore& store, const std::string& name, std::size_t cin,
                                     std::size_t cout, std::size_t stride, Rng& rng) {
  Conv c;
  c.linear = make_linear(store, name, 9 * cin, cout, rng);
  c.stride = stride;
  return c;
}

Extractor::Extractor(const ExtractorConfig& config, std::uint64_t seed) : config_(config) {
  if (auto errors = config.validate(); !errors.empty()) {
    std::string msg = "invalid extractor config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  Rng rng(seed);
  const std::size_t s = config.image_size;
  const std::size_t wide = 2 * config.base_channels;

  std::size_t cin = 3;
  for (std::size_t i = 0; i < kEncoderStages; ++i) {
    const std::size_t cout = i == 0 ? config.base_channels : wide;
    encoder_.push_back(make_conv(gen_, "encoder.conv" + std::to_string(i), cin, cout, 2, rng));
    cin = cout;
  }
  const std::size_t side = s >> kEncoderStages;
  encoder_head_ = make_linear(gen_, "encoder.head", side * side * wide, config.style_dim, rng);

  const std::size_t c = config.decoder_channels;
  seed_map_ = gen_.add("decoder.seed", Tensor::zeros({kSeedSide, kSeedSide, c}));
  fill_uniform(seed_map_, 1.0, rng);
  for (std::size_t side_now = kSeedSide, i = 0; side_now < s; side_now *= 2, ++i) {
    const std::string name = "decoder.stage" + std::to_string(i);
    Stage st;
    st.conv = make_conv(gen_, name + ".conv", c, c, 1, rng);
    st.scale = make_linear(gen_, name + ".scale", config.style_dim, c, rng);
    st.shift = make_linear(gen_, name + ".shift", config.style_dim, c, rng);
    stages_.push_back(std::move(st));
  }
  to_rgb_ = make_linear(gen_, "decoder.to_rgb", c, 3, rng);

  if (config.adversarial) {
    const std::array<std::size_t, 4> chans = {3, 8, 16, 16};
    for (std::size_t i = 0; i + 1 < chans.size(); ++i) {
      disc_convs_.push_back(make_conv(disc_, "disc.conv" + std::to_string(i), chans[i], chans[i + 1], 2, rng));
    }
    const std::size_t dside = s >> 3;
    disc_head_ = make_linear(disc_, "disc.head", dside * dside * chans.back(), 1, rng);
  }
}

void Extractor::check_images(const Tensor& images) const {
  const std::size_t s = config_.image_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("extractor expects B x 3 x " + std::to_string(s) + " x " + std::to_string(s) +
                         " images, got " + shape_string(images.shape()));
  }
}

Tensor Extractor::encode_batch(const Tensor& images) const {
  check_images(images);
  Tensor x = permute(images, {0, 2, 3, 1});
  for (const auto& conv : encoder_) x = relu(conv(x));
  return encoder_head_(reshape(x, {x.dim(0), x.numel() / x.dim(0)}));
}

std::pair<Tensor, Tensor> Extractor::modulation(std::size_t stage, const Tensor& codes) const {
  const Stage& st = stages_.at(stage);
  return {add_scalar(st.scale(codes), 1.0), st.shift(codes)};
}

Tensor Extractor::stage_forward(std::size_t stage, const Tensor& x, const Tensor& scale, const Tensor& shift) const {
  const Stage& st = stages_.at(stage);
  const Tensor y = st.conv(upsample2x(x));
  const Shape shape = y.shape();
  const Tensor flat = reshape(y, {shape[0], shape[1] * shape[2], shape[3]});
  return reshape(relu(channel_affine(flat, scale, shift)), shape);
}

Tensor Extractor::decode_batch(const Tensor& codes) const {
  if (codes.rank() != 2 || codes.dim(1) != config_.style_dim) {
    throw DimensionError("decoder expects B x " + std::to_string(config_.style_dim) + " codes, got " +
                         shape_string(codes.shape()));
  }
  const std::size_t b = codes.dim(0);
  const std::size_t c = config_.decoder_channels;
  const std::size_t s = config_.image_size;
  Tensor x = reshape(repeat_rows(reshape(seed_map_, {1, seed_map_.numel()}), b), {b, kSeedSide, kSeedSide, c});
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    auto [scale, shift] = modulation(i, codes);
    x = stage_forward(i, x, scale, shift);
  }
  const Tensor rgb = sigmoid(to_rgb_(reshape(x, {b * s * s, c})));
  return permute(reshape(rgb, {b, s, s, 3}), {0, 3, 1, 2});
}

Tensor Extractor::discriminate(const Tensor& images) const {
  if (!config_.adversarial) throw ContractError("discriminator is disabled in this extractor config");
  check_images(images);
  Tensor x = permute(images, {0, 2, 3, 1});
  for (const auto& conv : disc_convs_) x = relu(conv(x));
  const std::size_t b = x.dim(0);
  return reshape(disc_head_(reshape(x, {b, x.numel() / b})), {b});
}

std::vector<double> Extractor::encode(std::span<const double> window) const {
  const std::size_t s = config_.image_size;
  if (window.size() != 3 * s * s) {
    throw DimensionError("encode expects a 3 x " + std::to_string(s) + " x " + std::to_string(s) + " window (" +
                         std::to_string(3 * s * s) + " values), got " + std::to_string(window.size()));
  }
  NoGradScope ng;
  const Tensor e = encode_batch(Tensor::from({1, 3, s, s}, {window.begin(), window.end()}));
  return {e.data().begin(), e.data().end()};
}

std::vector<double> Extractor::decode(std::span<const double> view) const {
  if (view.size() != config_.style_dim) {
    throw DimensionError("decode expects a " + std::to_string(config_.style_dim) + "-vector, got length " +
                         std::to_string(view.size()));
  }
  NoGradScope ng;
  const Tensor x = decode_batch(Tensor::from({1, view.size()}, {view.begin(), view.end()}));
  return {x.data().begin(), x.data().end()};
}

GlobalView Extractor::encode_window(const DatasetBundle& bundle, std::size_t index) const {
  return {encode(bundle.image(index)), bundle.windows.at(index).id, bundle.windows.at(index).patient_id};
}

Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw DimensionError("reconstruction_loss: shapes " + shape_string(x.shape()) + " and " +
                         shape_string(x_hat.shape()) + " differ");
  }
  return mean_all(abs(sub(x, x_hat)));
}

AdversarialTerms adversarial_losses(const Tensor& x, const Tensor& x_hat, const Extractor& extractor) {
  if (!extractor.config().adversarial) throw ContractError("adversarial_losses called with the discriminator disabled");
  const Tensor real = extractor.discriminate(x);
  const Tensor fake = extractor.discriminate(x_hat);
  return {mean_all(softplus(neg(fake))), mean_all(add(softplus(neg(real)), softplus(fake)))};
}

Tensor window_batch(const DatasetBundle& bundle, std::span<const std::size_t> indices) {
  const std::size_t s = bundle.image_size;
  const std::size_t per = bundle.pixels_per_window();
  std::vector<double> data(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = bundle.image(indices[i]);
    std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor::from({indices.size(), 3, s, s}, std::move(data));
}

namespace {

std::vector<std::size_t> all_windows(const DatasetBundle& bundle, std::span<const std::size_t> windows) {
  if (!windows.empty()) return {windows.begin(), windows.end()};
  std::vector<std::size_t> out(bundle.size());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

void check_bundle(const Extractor& extractor, const DatasetBundle& bundle) {
  if (bundle.image_size != extractor.config().image_size) {
    throw DimensionError("bundle windows are " + std::to_string(bundle.image_size) + " px but the extractor expects " +
                         std::to_string(extractor.config().image_size) + " px");
  }
}

}  // namespace

std::vector<ExtractorLogRow> train_extractor(Extractor& extractor, const DatasetBundle& bundle,
                                             std::span<const std::size_t> windows, std::uint64_t seed) {
  check_bundle(extractor, bundle);
  std::vector<std::size_t> order = all_windows(bundle, windows);
  if (order.empty()) throw DataError("train_extractor: no windows to train on");
  const ExtractorConfig& cfg = extractor.config();
  AdamW gen_opt(extractor.generator_parameters().entries(), {.lr = cfg.lr});
  AdamW disc_opt(extractor.discriminator_parameters().entries(), {.lr = cfg.lr});
  Rng rng(seed);

  std::vector<ExtractorLogRow> log;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    ExtractorLogRow row;
    row.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor x = window_batch(bundle, idx);
      const double weight = static_cast<double>(idx.size()) / static_cast<double>(order.size());

      Tape tape;
      Tensor x_hat;
      {
        TapeScope scope(tape);
        x_hat = extractor.decode_batch(extractor.encode_batch(x));
        const Tensor l1 = reconstruction_loss(x, x_hat);
        Tensor loss = l1;
        double gen_term = 0.0;
        if (cfg.adversarial) {
          const Tensor g = mean_all(softplus(neg(extractor.discriminate(x_hat))));
          gen_term = g.item();
          loss = add(loss, scale(g, cfg.adversarial_weight));
        }
        if (!std::isfinite(loss.item())) {
          throw NumericError("extractor training produced a non-finite loss at epoch " + std::to_string(epoch + 1) +
                             ", step " + std::to_string(step + 1));
        }
        gen_opt.zero_grad();
        backward(loss);
        gen_opt.step();
        row.l1 += weight * l1.item();
        row.generator += weight * gen_term;
      }
      if (cfg.adversarial) {
        extractor.discriminator_parameters().clear_grad();
        TapeScope scope(tape);
        const Tensor d = adversarial_losses(x, x_hat.detach(), extractor).discriminator;
        if (!std::isfinite(d.item())) {
          throw NumericError("discriminator loss became non-finite at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(step + 1));
        }
        backward(d);
        disc_opt.step();
        row.discriminator += weight * d.item();
      }
    }
    log.push_back(row);
  }
  extractor.generator_parameters().clear_grad();
  extractor.discriminator_parameters().clear_grad();
  return log;
}

double mean_reconstruction_l1(const Extractor& extractor, const DatasetBundle& bundle,
                              std::span<const std::size_t> windows) {
  check_bundle(extractor, bundle);
  const std::vector<std::size_t> idx = all_windows(bundle, windows);
  NoGradScope ng;
  double total = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const std::size_t stop = std::min(idx.size(), start + kChunk);
    const std::span<const std::size_t> part(idx.data() + start, stop - start);
    const Tensor x = window_batch(bundle, part);
    total += reconstruction_loss(x, extractor.decode_batch(extractor.encode_batch(x))).item() *
             static_cast<double>(part.size());
  }
  return total / static_cast<double>(idx.size());
}

Matrix encode_bundle(const Extractor& extractor, const DatasetBundle& bundle) {
  check_bundle(extractor, bundle);
  const std::size_t d = extractor.config().style_dim;
  Matrix out(bundle.size(), d);
  NoGradScope ng;
  constexpr std::size_t kChunk = 64;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < bundle.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(bundle.size(), start + kChunk); ++i) idx.push_back(i);
    const Tensor e = extractor.encode_batch(window_batch(bundle, idx));
    std::copy(e.data().begin(), e.data().end(), out.values.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

void save_extractor(const std::filesystem::path& path, const Extractor& extractor, std::uint64_t seed) {
  detail::Json echo = detail::to_json(extractor.config());
  echo["seed"] = seed;
  Checkpoint ckpt;
  ckpt.magic = "EGNX";
  ckpt.config_json = echo.dump(2);
  for (const auto& e : extractor.generator_parameters().entries()) ckpt.tensors.push_back(e);
  for (const auto& e : extractor.discriminator_parameters().entries()) ckpt.tensors.push_back(e);
  write_checkpoint(path, ckpt);
}

Extractor load_extractor(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path, "EGNX");
  detail::Json echo;
  try {
    echo = detail::Json::parse(ckpt.config_json);
  } catch (const detail::Json::exception& e) {
    throw DataError(path.string() + ": malformed config echo: " + e.what());
  }
  std::uint64_t seed = 0;
  if (auto it = echo.find("seed"); it != echo.end() && it->is_number_unsigned()) seed = it->get<std::uint64_t>();
  echo.erase("seed");
  ExtractorConfig cfg;
  std::vector<std::string> errors;
  detail::JsonReader reader(echo, errors);
  detail::visit(reader, cfg);
  reader.finish();
  if (!errors.empty()) throw DataError(path.string() + ": bad config echo: " + errors.front());
  Extractor extractor(cfg, seed);
  std::vector<NamedTensor> params = extractor.generator_parameters().entries();
  for (const auto& e : extractor.discriminator_parameters().entries()) params.push_back(e);
  load_parameters(ckpt, params);
  return extractor;
}

}  // namespace egn
