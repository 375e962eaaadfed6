#pragma once

// Key lists for every config struct. Order here is the serialized order.

#include "egn/extractor.hpp"
#include "egn/model.hpp"
#include "json_fields.hpp"

namespace egn::detail {

// Extractor keys other than the window size, which a run config takes from its
// data section.
template <class V>
void visit_extractor_settings(V& v, ExtractorConfig& c) {
  v.field("style_dim", c.style_dim);
  v.field("base_channels", c.base_channels);
  v.field("decoder_channels", c.decoder_channels);
  v.field("epochs", c.epochs);
  v.field("batch_size", c.batch_size);
  v.field("lr", c.lr);
  v.field("adversarial", c.adversarial);
  v.field("adversarial_weight", c.adversarial_weight);
}

template <class V>
void visit(V& v, ExtractorConfig& c) {
  v.field("image_size", c.image_size);
  visit_extractor_settings(v, c);
}

// Architecture keys; window size, k, M and D come from the data, retrieval and
// extractor sections of a run config.
template <class V>
void visit_architecture(V& v, ModelConfig& c) {
  v.field("patch_size", c.patch_size);
  v.field("model_dim", c.model_dim);
  v.field("ffn_dim", c.ffn_dim);
  v.field("backbone_heads", c.backbone_heads);
  v.field("depth", c.depth);
  v.field("eb_heads", c.eb_heads);
  v.field("eb_head_dim", c.eb_head_dim);
  v.field("eb_frequency", c.eb_frequency);
  v.field("eb_zero_init", c.eb_zero_init);
}

template <class V>
void visit(V& v, ModelConfig& c) {
  v.field("image_size", c.image_size);
  visit_architecture(v, c);
  v.field("num_exemplars", c.num_exemplars);
  v.field("num_genes", c.num_genes);
  v.field("style_dim", c.style_dim);
}

template <class T>
Json to_json(const T& value) {
  Json root = Json::object();
  JsonWriter w(root);
  T copy = value;
  visit(w, copy);
  return root;
}

}  // namespace egn::detail
