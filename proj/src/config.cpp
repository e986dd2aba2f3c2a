#include "condenser/config.hpp"

#include <set>

#include "condenser/io_util.hpp"

namespace condenser {

using nlohmann::json;

namespace {

// Reads known keys and rejects the rest.
class StrictObject {
 public:
  StrictObject(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j_.is_object()) throw Error(what_ + ": expected an object");
  }

  template <typename T>
  StrictObject& get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw Error(what_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw Error(what_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

}  // namespace

namespace text {

void to_json(json& j, const MaskingOptions& o) {
  j = json{{"select_prob", o.select_prob}, {"mask_prob", o.mask_prob}, {"random_prob", o.random_prob}};
}

void from_json(const json& j, MaskingOptions& o) {
  StrictObject(j, "masking")
      .get("select_prob", o.select_prob)
      .get("mask_prob", o.mask_prob)
      .get("random_prob", o.random_prob)
      .finish();
}

}  // namespace text

void to_json(json& j, const ModelConfig& c) {
  j = json{{"early_layers", c.early_layers},   {"late_layers", c.late_layers},
           {"head_layers", c.head_layers},     {"hidden_dim", c.hidden_dim},
           {"num_heads", c.num_heads},         {"ffn_dim", c.ffn_dim},
           {"vocab_size", c.vocab_size},       {"max_position", c.max_position},
           {"dropout_rate", c.dropout_rate},   {"layer_norm_eps", c.layer_norm_eps},
           {"init_std", c.init_std},           {"backbone_loss_weight", c.backbone_loss_weight}};
}

void from_json(const json& j, ModelConfig& c) {
  StrictObject(j, "model")
      .get("early_layers", c.early_layers)
      .get("late_layers", c.late_layers)
      .get("head_layers", c.head_layers)
      .get("hidden_dim", c.hidden_dim)
      .get("num_heads", c.num_heads)
      .get("ffn_dim", c.ffn_dim)
      .get("vocab_size", c.vocab_size)
      .get("max_position", c.max_position)
      .get("dropout_rate", c.dropout_rate)
      .get("layer_norm_eps", c.layer_norm_eps)
      .get("init_std", c.init_std)
      .get("backbone_loss_weight", c.backbone_loss_weight)
      .finish();
}

void to_json(json& j, const AdamWOptions& o) {
  j = json{{"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay}};
}

void from_json(const json& j, AdamWOptions& o) {
  StrictObject(j, "adamw")
      .get("beta1", o.beta1)
      .get("beta2", o.beta2)
      .get("eps", o.eps)
      .get("weight_decay", o.weight_decay)
      .finish();
}

void to_json(json& j, const PretrainOptions& o) {
  j = json{{"epochs", o.epochs},
           {"micro_batch_size", o.micro_batch_size},
           {"accumulation_steps", o.accumulation_steps},
           {"max_len", o.max_len},
           {"peak_lr", o.peak_lr},
           {"warmup_ratio", o.warmup_ratio},
           {"adamw", o.adamw},
           {"masking", o.masking},
           {"static_masking", o.static_masking},
           {"detach_cls", o.detach_cls},
           {"isolate_head_position0", o.isolate_head_position0},
           {"seed", o.seed}};
}

void from_json(const json& j, PretrainOptions& o) {
  StrictObject(j, "pretrain")
      .get("epochs", o.epochs)
      .get("micro_batch_size", o.micro_batch_size)
      .get("accumulation_steps", o.accumulation_steps)
      .get("max_len", o.max_len)
      .get("peak_lr", o.peak_lr)
      .get("warmup_ratio", o.warmup_ratio)
      .get("adamw", o.adamw)
      .get("masking", o.masking)
      .get("static_masking", o.static_masking)
      .get("detach_cls", o.detach_cls)
      .get("isolate_head_position0", o.isolate_head_position0)
      .get("seed", o.seed)
      .finish();
}

void to_json(json& j, const FinetuneOptions& o) {
  j = json{{"epochs", o.epochs},
           {"batch_size", o.batch_size},
           {"accumulation_steps", o.accumulation_steps},
           {"max_len", o.max_len},
           {"peak_lr", o.peak_lr},
           {"warmup_ratio", o.warmup_ratio},
           {"adamw", o.adamw},
           {"seed", o.seed},
           {"dropout", o.dropout},
           {"passages_per_query", o.passages_per_query},
           {"in_batch_negatives", o.in_batch_negatives},
           {"fill_random_negatives", o.fill_random_negatives},
           {"two_tower", o.two_tower},
           {"margin", o.margin}};
}

void from_json(const json& j, FinetuneOptions& o) {
  StrictObject(j, "finetune")
      .get("epochs", o.epochs)
      .get("batch_size", o.batch_size)
      .get("accumulation_steps", o.accumulation_steps)
      .get("max_len", o.max_len)
      .get("peak_lr", o.peak_lr)
      .get("warmup_ratio", o.warmup_ratio)
      .get("adamw", o.adamw)
      .get("seed", o.seed)
      .get("dropout", o.dropout)
      .get("passages_per_query", o.passages_per_query)
      .get("in_batch_negatives", o.in_batch_negatives)
      .get("fill_random_negatives", o.fill_random_negatives)
      .get("two_tower", o.two_tower)
      .get("margin", o.margin)
      .finish();
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model},     {"pretrain", c.pretrain}, {"finetune", c.finetune},
           {"seed", c.seed},       {"threads", c.threads},   {"paths", c.paths}};
}

void from_json(const json& j, RunConfig& c) {
  StrictObject(j, "config")
      .get("model", c.model)
      .get("pretrain", c.pretrain)
      .get("finetune", c.finetune)
      .get("seed", c.seed)
      .get("threads", c.threads)
      .get("paths", c.paths)
      .finish();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return c;
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  io::write_atomic(path, json(config).dump(2) + "\n");
}

}  // namespace condenser
