#pragma once

// Experiment configuration: one JSON file covering data, model, losses,
// attacks, optimizer, scoring and the training schedule. Two presets are
// built in — "desk" (small toy runs, the default) and "paper" (the full-scale
// settings: lr 0.5, batch 512, 500 epochs, epsilon 8/255). Any key can be
// overridden with --path.to.key=value flags.

#include "sagd/attacks.hpp"
#include "sagd/common.hpp"
#include "sagd/data.hpp"
#include "sagd/model.hpp"
#include "sagd/optim.hpp"

#include "json.hpp"

#include <array>
#include <string>
#include <vector>

namespace sagd {

struct LossConfig {
  double sphere_tau = 0.1;
  double hyperbolic_tau = 0.5;
  double w_sphere = 1.0;
  double w_hyperbolic = 1.0;
  double w_cross_entropy = 1.0;
  bool average_anchors = false;
  double proto_ema = 0.95;

  LossWeights weights() const {
    LossWeights w;
    w.sphere = w_sphere;
    w.hyperbolic = w_hyperbolic;
    w.cross_entropy = w_cross_entropy;
    w.hyperbolic_tau = hyperbolic_tau;
    w.average_anchors = average_anchors;
    return w;
  }
};

struct ScoringConfig {
  std::string kind = "knn";  // knn | maha
  int knn_k = 0;             // 0: default_knn_k(bank size)
  double maha_ridge = 1e-3;

  void validate() const {
    if (kind != "knn" && kind != "maha")
      throw ConfigError("ScoringConfig: unknown scorer '" + kind + "'");
    if (knn_k < 0) throw ConfigError("ScoringConfig: knn_k must be >= 0");
    if (!(maha_ridge >= 0.0)) throw ConfigError("ScoringConfig: maha_ridge must be >= 0");
  }
};

struct DataConfig {
  std::string source = "toy";  // toy | image
  std::array<double, 2> input_range{-30.0, 30.0};
  ToyDatasetSpec toy;
  std::string image_train_root;
  std::string image_id_test_root;
  std::string image_ood_test_root;
  AugmentationSpec augment;

  void validate() const {
    if (source != "toy" && source != "image")
      throw ConfigError("DataConfig: unknown source '" + source + "'");
    if (!(input_range[0] < input_range[1]))
      throw ConfigError("DataConfig: empty input_range");
    if (source == "toy") toy.validate();
    if (source == "image" &&
        (image_train_root.empty() || image_id_test_root.empty() ||
         image_ood_test_root.empty()))
      throw ConfigError("DataConfig: image source needs train/id_test/ood_test roots");
    augment.validate();
  }
};

struct TrainControl {
  int epochs = 50;
  int batch_size = 128;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/out";
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  bool mix_clean = false;    // true: train on clean+adversarial concatenated
  std::string lr_schedule = "cosine";  // cosine | constant
  int sharpness_cadence = 0;           // epochs between probe log lines; 0 = off
  double sharpness_rho = 0.05;
  int sharpness_trials = 1;

  void validate() const {
    if (epochs < 0) throw ConfigError("TrainControl: epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("TrainControl: batch_size must be >= 2");
    if (output_dir.empty()) throw ConfigError("TrainControl: output_dir is empty");
    if (lr_schedule != "cosine" && lr_schedule != "constant")
      throw ConfigError("TrainControl: unknown lr_schedule '" + lr_schedule + "'");
    if (sharpness_cadence < 0 || sharpness_trials < 1 || !(sharpness_rho >= 0.0))
      throw ConfigError("TrainControl: bad sharpness probe settings");
  }
};

struct ExperimentConfig {
  DataConfig data;
  BackboneConfig model;
  LossConfig loss;
  AttackConfig attack;  // train-time attack; eval conditions reuse its budget
  std::vector<std::string> eval_attacks = {"none", "jitter", "pgd", "fgsm"};
  int histogram_bins = 40;
  RSAMConfig optim;
  ScoringConfig scoring;
  TrainControl train;

  // Desk-scale defaults: 16-d 4-class Gaussian mixture, small MLP, short
  // schedule. This is the default preset.
  static ExperimentConfig desk_default() {
    ExperimentConfig cfg;
    cfg.data.source = "toy";
    cfg.data.input_range = {-30.0, 30.0};
    cfg.data.toy.kind = "gaussian_mixture";
    cfg.data.toy.num_classes = 4;
    cfg.data.toy.dim = 16;
    cfg.data.toy.samples_per_class = 200;
    cfg.data.toy.class_separation = 6.0;
    cfg.data.toy.ood_shift = 6.0;
    cfg.data.augment.views_per_sample = 2;
    cfg.data.augment.vector_noise_scale = 0.1;

    cfg.model.architecture = "mlp";
    cfg.model.input_shape = {16};
    cfg.model.hidden_sizes = {64, 64};
    cfg.model.embed_dim = 32;
    cfg.model.num_classes = 4;
    cfg.model.ball.curvature = 0.01;
    cfg.model.ball.clip_radius = 2.0;

    cfg.attack.name = "jitter";
    cfg.attack.epsilon = 1.0;
    cfg.attack.step_size = 0.25;
    cfg.attack.num_steps = 10;

    cfg.optim.rho = 0.05;
    cfg.optim.lr = 0.05;
    cfg.optim.momentum = 0.9;
    cfg.optim.weight_decay = 1e-4;

    cfg.train.epochs = 50;
    cfg.train.batch_size = 128;
    return cfg;
  }

  // Full-scale settings: image pipeline, resnet-like backbone, momentum 0.9,
  // weight decay 1e-4, initial lr 0.5, batch 512, 500 epochs, 128-d heads,
  // curvature 0.01, epsilon 8/255 with 2/255 steps for 10 iterations.
  static ExperimentConfig paper_default() {
    ExperimentConfig cfg;
    cfg.data.source = "image";
    cfg.data.input_range = {0.0, 1.0};
    cfg.data.augment.image_shape = {3, 32, 32};
    cfg.data.augment.crop_shift = 4;
    cfg.data.augment.brightness_jitter = 0.1;

    cfg.model.architecture = "resnet_like";
    cfg.model.input_shape = {3, 32, 32};
    cfg.model.hidden_sizes = {256};
    cfg.model.embed_dim = 128;
    cfg.model.num_classes = 10;
    cfg.model.conv_channels = 32;
    cfg.model.ball.curvature = 0.01;

    cfg.attack.name = "jitter";
    cfg.attack.epsilon = 8.0 / 255.0;
    cfg.attack.step_size = 2.0 / 255.0;
    cfg.attack.num_steps = 10;
    cfg.attack.input_range = {0.0, 1.0};

    cfg.optim.rho = 0.05;
    cfg.optim.lr = 0.5;
    cfg.optim.momentum = 0.9;
    cfg.optim.weight_decay = 1e-4;

    cfg.train.epochs = 500;
    cfg.train.batch_size = 512;
    return cfg;
  }

  // Keeps the single data range authoritative across attacks/augmentation.
  void propagate_input_range() {
    attack.input_range = data.input_range;
    data.augment.input_range = data.input_range;
  }

  void validate() const {
    data.validate();
    model.validate();
    attack.validate();
    optim.validate();
    scoring.validate();
    train.validate();
    if (histogram_bins < 1) throw ConfigError("ExperimentConfig: histogram_bins >= 1");
    if (!(loss.sphere_tau > 0.0) || !(loss.hyperbolic_tau > 0.0))
      throw ConfigError("ExperimentConfig: temperatures must be > 0");
    if (!(loss.proto_ema >= 0.0 && loss.proto_ema <= 1.0))
      throw ConfigError("ExperimentConfig: proto_ema must be in [0, 1]");
    for (const std::string& a : eval_attacks)
      if (a != "none" && a != "jitter" && a != "pgd" && a != "fgsm")
        throw ConfigError("ExperimentConfig: unknown eval attack '" + a + "'");
    if (eval_attacks.empty())
      throw ConfigError("ExperimentConfig: eval_attacks is empty");
  }
};

// --------------------------- JSON adapters ---------------------------------

inline void to_json(nlohmann::json& j, const ToyDatasetSpec& s) {
  j = {{"kind", s.kind},
       {"num_classes", s.num_classes},
       {"dim", s.dim},
       {"samples_per_class", s.samples_per_class},
       {"test_samples_per_class", s.test_samples_per_class},
       {"class_separation", s.class_separation},
       {"ood_shift_vector", s.ood_shift_vector},
       {"ood_shift", s.ood_shift},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ToyDatasetSpec& s) {
  j.at("kind").get_to(s.kind);
  j.at("num_classes").get_to(s.num_classes);
  j.at("dim").get_to(s.dim);
  j.at("samples_per_class").get_to(s.samples_per_class);
  j.at("test_samples_per_class").get_to(s.test_samples_per_class);
  j.at("class_separation").get_to(s.class_separation);
  j.at("ood_shift_vector").get_to(s.ood_shift_vector);
  j.at("ood_shift").get_to(s.ood_shift);
  j.at("seed").get_to(s.seed);
}

inline void to_json(nlohmann::json& j, const AugmentationSpec& s) {
  j = {{"views_per_sample", s.views_per_sample},
       {"vector_noise_scale", s.vector_noise_scale},
       {"image_shape", s.image_shape},
       {"crop_shift", s.crop_shift},
       {"hflip", s.hflip},
       {"brightness_jitter", s.brightness_jitter},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, AugmentationSpec& s) {
  j.at("views_per_sample").get_to(s.views_per_sample);
  j.at("vector_noise_scale").get_to(s.vector_noise_scale);
  j.at("image_shape").get_to(s.image_shape);
  j.at("crop_shift").get_to(s.crop_shift);
  j.at("hflip").get_to(s.hflip);
  j.at("brightness_jitter").get_to(s.brightness_jitter);
  j.at("seed").get_to(s.seed);
}

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"source", c.source},
       {"input_range", c.input_range},
       {"toy", c.toy},
       {"image_train_root", c.image_train_root},
       {"image_id_test_root", c.image_id_test_root},
       {"image_ood_test_root", c.image_ood_test_root},
       {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
  j.at("source").get_to(c.source);
  j.at("input_range").get_to(c.input_range);
  j.at("toy").get_to(c.toy);
  j.at("image_train_root").get_to(c.image_train_root);
  j.at("image_id_test_root").get_to(c.image_id_test_root);
  j.at("image_ood_test_root").get_to(c.image_ood_test_root);
  j.at("augment").get_to(c.augment);
}

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"sphere_tau", c.sphere_tau},
       {"hyperbolic_tau", c.hyperbolic_tau},
       {"w_sphere", c.w_sphere},
       {"w_hyperbolic", c.w_hyperbolic},
       {"w_cross_entropy", c.w_cross_entropy},
       {"average_anchors", c.average_anchors},
       {"proto_ema", c.proto_ema}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  j.at("sphere_tau").get_to(c.sphere_tau);
  j.at("hyperbolic_tau").get_to(c.hyperbolic_tau);
  j.at("w_sphere").get_to(c.w_sphere);
  j.at("w_hyperbolic").get_to(c.w_hyperbolic);
  j.at("w_cross_entropy").get_to(c.w_cross_entropy);
  j.at("average_anchors").get_to(c.average_anchors);
  j.at("proto_ema").get_to(c.proto_ema);
}

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"name", c.name},
       {"epsilon", c.epsilon},
       {"step_size", c.step_size},
       {"steps", c.num_steps},
       {"jitter", {{"alpha", c.jitter_alpha}, {"sigma", c.jitter_sigma}, {"beta", c.jitter_beta}}},
       {"random_start", c.pgd_random_start},
       {"input_range", c.input_range},
       {"eval_policy", c.eval_policy}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  j.at("name").get_to(c.name);
  j.at("epsilon").get_to(c.epsilon);
  j.at("step_size").get_to(c.step_size);
  j.at("steps").get_to(c.num_steps);
  j.at("jitter").at("alpha").get_to(c.jitter_alpha);
  j.at("jitter").at("sigma").get_to(c.jitter_sigma);
  j.at("jitter").at("beta").get_to(c.jitter_beta);
  j.at("random_start").get_to(c.pgd_random_start);
  j.at("input_range").get_to(c.input_range);
  j.at("eval_policy").get_to(c.eval_policy);
}

inline void to_json(nlohmann::json& j, const RSAMConfig& c) {
  j = {{"rho", c.rho},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"grad_norm_eps", c.grad_norm_eps},
       {"radius_mode", c.radius_mode}};
}

inline void from_json(const nlohmann::json& j, RSAMConfig& c) {
  j.at("rho").get_to(c.rho);
  j.at("lr").get_to(c.lr);
  j.at("momentum").get_to(c.momentum);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_norm_eps").get_to(c.grad_norm_eps);
  j.at("radius_mode").get_to(c.radius_mode);
}

inline void to_json(nlohmann::json& j, const ScoringConfig& c) {
  j = {{"kind", c.kind}, {"knn_k", c.knn_k}, {"maha_ridge", c.maha_ridge}};
}

inline void from_json(const nlohmann::json& j, ScoringConfig& c) {
  j.at("kind").get_to(c.kind);
  j.at("knn_k").get_to(c.knn_k);
  j.at("maha_ridge").get_to(c.maha_ridge);
}

inline void to_json(nlohmann::json& j, const TrainControl& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"checkpoint_every", c.checkpoint_every},
       {"mix_clean", c.mix_clean},
       {"lr_schedule", c.lr_schedule},
       {"sharpness_cadence", c.sharpness_cadence},
       {"sharpness_rho", c.sharpness_rho},
       {"sharpness_trials", c.sharpness_trials}};
}

inline void from_json(const nlohmann::json& j, TrainControl& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("output_dir").get_to(c.output_dir);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("mix_clean").get_to(c.mix_clean);
  j.at("lr_schedule").get_to(c.lr_schedule);
  j.at("sharpness_cadence").get_to(c.sharpness_cadence);
  j.at("sharpness_rho").get_to(c.sharpness_rho);
  j.at("sharpness_trials").get_to(c.sharpness_trials);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"preset", "desk"},  // informational; fields below are fully resolved
       {"data", c.data},
       {"model", c.model},
       {"loss", c.loss},
       {"attack", c.attack},
       {"eval_attacks", c.eval_attacks},
       {"histogram_bins", c.histogram_bins},
       {"optim", c.optim},
       {"scoring", c.scoring},
       {"train", c.train}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  j.at("data").get_to(c.data);
  j.at("model").get_to(c.model);
  j.at("loss").get_to(c.loss);
  j.at("attack").get_to(c.attack);
  j.at("eval_attacks").get_to(c.eval_attacks);
  j.at("histogram_bins").get_to(c.histogram_bins);
  j.at("optim").get_to(c.optim);
  j.at("scoring").get_to(c.scoring);
  j.at("train").get_to(c.train);
}

// ---------------------------------------------------------------------------
// Loading with presets and dotted-key overrides.
// ---------------------------------------------------------------------------

// Parses "a.b.c=value"; value is interpreted as JSON when it parses
// (numbers, booleans, arrays), as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: '" + assignment + "'");
  std::string path = "/" + assignment.substr(0, eq);
  for (auto& ch : path)
    if (ch == '.') ch = '/';
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  try {
    nlohmann::json::json_pointer ptr(path);
    if (!j.contains(ptr))
      throw ConfigError("unknown config key '" + assignment.substr(0, eq) + "'");
    j[ptr] = value;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad override '" + assignment + "': " + e.what());
  }
}

// Resolution order: preset defaults, then the config file's keys (partial
// files are fine), then --key=value overrides.
inline ExperimentConfig load_experiment_config(const std::string& file_text,
                                               const std::vector<std::string>& overrides) {
  nlohmann::json file_json;
  try {
    file_json = nlohmann::json::parse(file_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  std::string preset = "desk";
  if (file_json.contains("preset")) file_json.at("preset").get_to(preset);
  ExperimentConfig base;
  if (preset == "desk") {
    base = ExperimentConfig::desk_default();
  } else if (preset == "paper") {
    base = ExperimentConfig::paper_default();
  } else {
    throw ConfigError("unknown preset '" + preset + "'");
  }

  nlohmann::json merged = base;  // fully resolved defaults
  merged["preset"] = preset;
  merged.merge_patch(file_json);
  for (const std::string& ov : overrides) apply_override(merged, ov);

  ExperimentConfig cfg = merged.get<ExperimentConfig>();
  cfg.propagate_input_range();
  cfg.validate();
  return cfg;
}

inline std::string experiment_config_to_text(const ExperimentConfig& cfg) {
  nlohmann::json j = cfg;
  return j.dump(2) + "\n";
}

}  // namespace sagd
