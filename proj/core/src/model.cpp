#include "egn/model.hpp"

#include <cmath>

#include "config_visit.hpp"
#include "egn/checkpoint.hpp"
#include "egn/error.hpp"

namespace egn {

std::size_t ModelConfig::num_patches() const {
  const std::size_t n = patch_size ? image_size / patch_size : 0;
  return n * n;
}

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errors;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) errors.push_back(std::string("model.") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(model_dim, "model_dim");
  positive(ffn_dim, "ffn_dim");
  positive(backbone_heads, "backbone_heads");
  positive(depth, "depth");
  positive(eb_heads, "eb_heads");
  positive(eb_head_dim, "eb_head_dim");
  positive(num_exemplars, "num_exemplars");
  positive(num_genes, "num_genes");
  positive(style_dim, "style_dim");
  if (patch_size && image_size % patch_size != 0) {
    errors.push_back("model.image_size (" + std::to_string(image_size) + ") must be divisible by model.patch_size (" +
                     std::to_string(patch_size) + ")");
  }
  if (backbone_heads && model_dim % backbone_heads != 0) {
    errors.push_back("model.model_dim must be divisible by model.backbone_heads");
  }
  if (eb_frequency < 1 || eb_frequency > depth) errors.push_back("model.eb_frequency must lie in [1, depth]");
  return errors;
}

ModelConfig full_scale_model_config() {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 32;
  c.model_dim = 1024;
  c.ffn_dim = 4096;
  c.backbone_heads = 16;
  c.depth = 8;
  c.eb_heads = 8;
  c.eb_head_dim = 64;
  c.eb_frequency = 2;
  c.num_exemplars = 9;
  c.num_genes = 250;
  c.style_dim = 256;
  return c;
}

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::kFull;
  if (name == "backbone_only") return Variant::kBackboneOnly;
  if (name == "without_eb") return Variant::kWithoutEb;
  if (name == "without_projector") return Variant::kWithoutProjector;
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected full, backbone_only, without_eb or without_projector)");
}

std::string variant_name(Variant variant) {
  switch (variant) {
    case Variant::kFull:
      return "full";
    case Variant::kBackboneOnly:
      return "backbone_only";
    case Variant::kWithoutEb:
      return "without_eb";
    case Variant::kWithoutProjector:
      return "without_projector";
  }
  return "?";
}

EgnModel::EgnModel(const ModelConfig& config, Variant variant, std::uint64_t seed)
    : config_(config), variant_(variant), seed_(seed) {
  if (auto errors = config.validate(); !errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  Rng rng(seed);
  const std::size_t dm = config.model_dim, p = config.patch_size, l = config.num_patches();
  const std::size_t d = config.style_dim, m = config.num_genes;

  patch_ = make_linear(params_, "patch", 3 * p * p, dm, rng);
  pos_ = params_.add("pos", Tensor::zeros({l, dm}));
  fill_normal(pos_, 0.02, rng);
  for (std::size_t t = 0; t < config.depth; ++t) {
    const std::string name = "block" + std::to_string(t);
    Block b;
    b.ln1 = make_layer_norm(params_, name + ".ln1", dm);
    b.qkv = make_linear(params_, name + ".attn.qkv", dm, 3 * dm, rng);
    b.out = make_linear(params_, name + ".attn.out", dm, dm, rng);
    b.ln2 = make_layer_norm(params_, name + ".ln2", dm);
    b.ffn1 = make_linear(params_, name + ".ffn1", dm, config.ffn_dim, rng);
    b.ffn2 = make_linear(params_, name + ".ffn2", config.ffn_dim, dm, rng);
    blocks_.push_back(std::move(b));
  }

  if (variant == Variant::kWithoutProjector) {
    proj_h1_ = make_linear(params_, "proj.h", d, dm, rng);
    proj_r_ = make_linear(params_, "proj.r", d + m, dm, rng);
    proj_s1_ = make_linear(params_, "proj.s", m, dm, rng);
  } else if (variant != Variant::kBackboneOnly) {
    // MLP0_r reuses these two layers; only its extra layer is new.
    proj_h1_ = make_linear(params_, "proj.h1", d, dm, rng);
    proj_h2_ = make_linear(params_, "proj.h2", dm, dm, rng);
    if (variant == Variant::kFull) {
      proj_r_ = make_linear(params_, "proj.r_extra", dm + m, dm, rng);
      proj_s1_ = make_linear(params_, "proj.s1", m, dm, rng);
      proj_s2_ = make_linear(params_, "proj.s2", dm, dm, rng);
    }
  }

  if (has_eb()) {
    const std::size_t g = config.eb_heads, de = config.eb_head_dim;
    const Init out_init = config.eb_zero_init ? Init::kZero : Init::kUniformFanIn;
    for (std::size_t i = 0; i < config.num_eb_blocks(); ++i) {
      const std::string name = "eb" + std::to_string(i);
      EbBlock e;
      e.s = make_linear(params_, name + ".s", dm, dm, rng);
      e.m1 = make_linear(params_, name + ".m1", 2 * dm, 2 * dm, rng);
      e.m2 = make_linear(params_, name + ".m2", 2 * dm, 2 * dm, rng);
      e.gate = make_linear(params_, name + ".gate", dm, g * l, rng);
      e.o = make_linear(params_, name + ".o", dm, 2 * g * de, rng);
      e.z = make_linear(params_, name + ".z", g * de, dm, rng, false, out_init);
      e.h = make_linear(params_, name + ".h", g * de, dm, rng, false, out_init);
      eb_.push_back(std::move(e));
    }
  }

  pool_query_ = params_.add("pool.query", Tensor::zeros({dm}));
  fill_normal(pool_query_, 0.02, rng);
  head_ = make_linear(params_, "head", has_projector() ? 2 * dm : dm, m, rng);
}

void EgnModel::check_input(const ModelInput& in) const {
  const std::size_t s = config_.image_size;
  const Tensor& x = in.images;
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s) {
    throw DimensionError("model expects B x 3 x " + std::to_string(s) + " x " + std::to_string(s) + " images, got " +
                         shape_string(x.shape()));
  }
  if (!has_projector()) return;
  const std::size_t b = x.dim(0), k = config_.num_exemplars;
  auto expect = [](const Tensor& t, const Shape& shape, const char* what) {
    if (!t.defined() || t.shape() != shape) {
      throw DimensionError(std::string(what) + " must be " + shape_string(shape) + ", got " +
                           (t.defined() ? shape_string(t.shape()) : std::string("nothing")));
    }
  };
  expect(in.query_views, {b, config_.style_dim}, "query views");
  if (variant_ == Variant::kWithoutEb) return;
  expect(in.exemplar_views, {b * k, config_.style_dim}, "exemplar views");
  expect(in.exemplar_targets, {b * k, config_.num_genes}, "exemplar targets");
}

Tensor EgnModel::patchify(const Tensor& images) const {
  const std::size_t b = images.dim(0), p = config_.patch_size;
  const std::size_t n = config_.image_size / p;
  const Tensor grid = reshape(images, {b, 3, n, p, n, p});
  // -> B, row, col, channel, py, px
  return reshape(permute(grid, {0, 2, 4, 1, 3, 5}), {b * n * n, 3 * p * p});
}

Tensor EgnModel::patch_embed(const Tensor& images) const {
  const std::size_t b = images.dim(0), l = config_.num_patches(), dm = config_.model_dim;
  const Tensor tokens = reshape(patch_(patchify(images)), {b, l, dm});
  return reshape(add(tokens, pos_), {b * l, dm});
}

Tensor EgnModel::transformer_block(std::size_t index, const Tensor& z, Tensor* attention) const {
  const Block& blk = blocks_.at(index);
  const std::size_t dm = config_.model_dim, l = config_.num_patches(), heads = config_.backbone_heads;
  const std::size_t b = z.dim(0) / l, dh = dm / heads;
  const Tensor qkv = blk.qkv(blk.ln1(z));
  auto split_heads = [&](std::size_t part) {
    const Tensor t = reshape(slice(qkv, 1, part * dm, dm), {b, l, heads, dh});
    return reshape(permute(t, {0, 2, 1, 3}), {b * heads, l, dh});
  };
  const Tensor q = split_heads(0), k = split_heads(1), v = split_heads(2);
  const Tensor weights = softmax(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
  if (attention) *attention = weights;
  const Tensor merged = reshape(permute(reshape(bmm(weights, v), {b, heads, l, dh}), {0, 2, 1, 3}), {b * l, dm});
  const Tensor x = add(z, blk.out(merged));
  return add(x, blk.ffn2(relu(blk.ffn1(blk.ln2(x)))));
}

Tensor EgnModel::project_h(const Tensor& views) const {
  if (variant_ == Variant::kWithoutProjector) return proj_h1_(views);
  return proj_h2_(relu(proj_h1_(views)));
}

EgnState EgnModel::project_inputs(const ModelInput& input) const {
  if (!has_projector()) throw ContractError("the backbone_only variant has no projector");
  check_input(input);
  EgnState st;
  st.h = project_h(input.query_views);
  if (variant_ == Variant::kWithoutEb) return st;
  const Tensor& ev = input.exemplar_views;
  const Tensor& ey = input.exemplar_targets;
  if (variant_ == Variant::kWithoutProjector) {
    st.r = proj_r_(concat(ev, ey, 1));
    st.s = proj_s1_(ey);
  } else {
    st.r = proj_r_(concat(project_h(ev), ey, 1));
    st.s = proj_s2_(relu(proj_s1_(ey)));
  }
  return st;
}

Stage1Result EgnModel::eb_stage1(std::size_t block, const EgnState& state) const {
  const EbBlock& e = eb_.at(block);
  const std::size_t k = config_.num_exemplars, dm = config_.model_dim;
  const std::size_t b = state.h.dim(0);
  Stage1Result out;
  out.s = e.s(state.s);
  const Tensor h_rep = repeat_rows(state.h, k);
  out.gates = sigmoid(e.m2(relu(e.m1(concat(h_rep, sub(h_rep, state.r), 1)))));
  auto [m_h, m_r] = chunk(out.gates, 1);
  // Sorted summation keeps the mean bit-identical under exemplar reordering.
  const Tensor pooled = reduce(ReduceOp::kMean, reshape(mul(m_h, out.s), {b, k, dm}), 1, Summation::kSorted);
  out.h_hat = add(state.h, pooled);
  out.r = add(state.r, mul(m_r, out.s));
  return out;
}

std::pair<Tensor, Tensor> EgnModel::eb_stage2(std::size_t block, const Tensor& h_hat, const Tensor& z) const {
  const EbBlock& e = eb_.at(block);
  const std::size_t g = config_.eb_heads, de = config_.eb_head_dim, l = config_.num_patches();
  const std::size_t b = h_hat.dim(0);
  // Gate layout is head-major (g * L + l); reorder to one scalar per (patch, head) row.
  const Tensor gate = sigmoid(e.gate(h_hat));
  const Tensor gate_rows = reshape(permute(reshape(gate, {b, g, l}), {0, 2, 1}), {b * l, g});
  const Tensor heads = reshape(e.o(z), {b * l, g, 2 * de});
  auto [o_h, o_z] = chunk(scale_rows(heads, gate_rows), 2);
  const Tensor z_next = add(z, e.z(reshape(o_z, {b * l, g * de})));
  const Tensor avg = mean(reshape(o_h, {b, l, g * de}), 1);
  return {add(h_hat, e.h(avg)), z_next};
}

Tensor EgnModel::attention_pool(const Tensor& z, Tensor* weights) const {
  const std::size_t dm = config_.model_dim, l = config_.num_patches();
  const std::size_t b = z.dim(0) / l;
  const Tensor scores = reshape(matmul(z, reshape(pool_query_, {dm, 1})), {b, l});
  const Tensor w = softmax(scale(scores, 1.0 / std::sqrt(static_cast<double>(dm))), 1);
  if (weights) *weights = w;
  return reshape(bmm(reshape(w, {b, 1, l}), reshape(z, {b, l, dm})), {b, dm});
}

namespace {

void guard(const Tensor& t, std::size_t layer, const char* what) {
  if (!all_finite(t)) {
    throw NumericError("non-finite " + std::string(what) + " after layer " + std::to_string(layer));
  }
}

}  // namespace

Tensor EgnModel::backbone(const Tensor& images, EgnState* state) const {
  Tensor z = patch_embed(images);
  guard(z, 0, "patch embedding");
  std::size_t eb_index = 0;
  for (std::size_t t = 0; t < config_.depth; ++t) {
    z = transformer_block(t, z);
    guard(z, t + 1, "patch representations");
    if (state && (t + 1) % config_.eb_frequency == 0 && eb_index < eb_.size()) {
      state->z = z;
      const Stage1Result s1 = eb_stage1(eb_index, *state);
      auto [h_next, z_next] = eb_stage2(eb_index, s1.h_hat, z);
      state->h = h_next;
      state->r = s1.r;
      state->s = s1.s;
      z = z_next;
      guard(state->h, t + 1, "refined global view");
      guard(state->r, t + 1, "exemplar views");
      guard(z, t + 1, "revised patch representations");
      ++eb_index;
    }
  }
  return z;
}

Tensor EgnModel::forward(const ModelInput& input) const {
  check_input(input);
  if (!has_projector()) return head_(attention_pool(backbone(input.images, nullptr)));
  EgnState state = project_inputs(input);
  guard(state.h, 0, "projected global view");
  const Tensor z = backbone(input.images, has_eb() ? &state : nullptr);
  return head_(concat(state.h, attention_pool(z), 1));
}

Tensor EgnModel::forward_without_eb(const ModelInput& input) const {
  if (!has_projector()) throw ContractError("forward_without_eb needs a variant with a projector");
  check_input(input);
  const Tensor h0 = project_h(input.query_views);
  return head_(concat(h0, attention_pool(backbone(input.images, nullptr)), 1));
}

void save_model(const std::filesystem::path& path, const EgnModel& model) {
  detail::Json echo = detail::Json::object();
  echo["variant"] = variant_name(model.variant());
  echo["seed"] = model.seed();
  echo["model"] = detail::to_json(model.config());
  Checkpoint ckpt;
  ckpt.magic = "EGNM";
  ckpt.config_json = echo.dump(2);
  ckpt.tensors = model.parameters().entries();
  write_checkpoint(path, ckpt);
}

EgnModel load_model(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path, "EGNM");
  detail::Json echo;
  try {
    echo = detail::Json::parse(ckpt.config_json);
  } catch (const detail::Json::exception& e) {
    throw DataError(path.string() + ": malformed config echo: " + e.what());
  }
  std::vector<std::string> errors;
  ModelConfig cfg;
  std::string variant = "full";
  std::uint64_t seed = 0;
  detail::JsonReader reader(echo, errors);
  reader.field("variant", variant);
  reader.field("seed", seed);
  reader.section("model", [&] { detail::visit(reader, cfg); });
  reader.finish();
  if (!errors.empty()) throw DataError(path.string() + ": bad config echo: " + errors.front());
  EgnModel model(cfg, parse_variant(variant), seed);
  load_parameters(ckpt, model.parameters().entries());
  return model;
}

}  // namespace egn
