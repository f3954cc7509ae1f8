#pragma once

// Experiment orchestration shared by the CLI and the acceptance suite:
// the adversarial-training loop (attack -> contrastive views -> joint loss ->
// RSAM step -> prototype EMA), the attack-sweep evaluation pipeline, the
// sharpness table, and embedding-bank export. All stages are deterministic
// under a fixed seed: reruns produce byte-identical logs and reports.

#include "sagd/attacks.hpp"
#include "sagd/common.hpp"
#include "sagd/config.hpp"
#include "sagd/data.hpp"
#include "sagd/eval.hpp"
#include "sagd/losses.hpp"
#include "sagd/model.hpp"
#include "sagd/optim.hpp"
#include "sagd/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace sagd {

// Gradient surface of an MgpNetwork for the attack toolbox. Attacks
// accumulate parameter gradients as a side effect; the training closure
// zeroes them before its own backward pass.
class MgpAttackAdapter : public DifferentiableModel {
 public:
  explicit MgpAttackAdapter(MgpNetwork& net) : net_(net) {}

  Mat logits(const Mat& x) override { return net_.forward(x).logits; }
  Mat logits_input_grad(const Mat& grad_logits) override {
    return net_.backward_logits_only(grad_logits);
  }
  Mat scoring_embedding(const Mat& x) override { return net_.embed_for_scoring(x); }
  Mat scoring_input_grad(const Mat& grad_embedding) override {
    return net_.backward_scoring(grad_embedding);
  }

 private:
  MgpNetwork& net_;
};

struct DatasetBundle {
  LabeledData id_train;
  LabeledData id_test;
  LabeledData ood_test;
};

inline DatasetBundle load_dataset(const ExperimentConfig& cfg) {
  DatasetBundle b;
  if (cfg.data.source == "toy") {
    ToyDataset toy = generate_toy(cfg.data.toy);
    b.id_train = std::move(toy.id_train);
    b.id_test = std::move(toy.id_test);
    b.ood_test = std::move(toy.ood_test);
  } else {
    b.id_train = load_image_dataset(cfg.data.image_train_root, cfg.data.input_range,
                                    cfg.train.seed);
    b.id_test = load_image_dataset(cfg.data.image_id_test_root, cfg.data.input_range,
                                   cfg.train.seed + 1);
    b.ood_test = load_image_dataset(cfg.data.image_ood_test_root, cfg.data.input_range,
                                    cfg.train.seed + 2);
  }
  return b;
}

namespace detail {

// Distinct deterministic rng streams derived from the training seed.
inline Rng seeded(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed * 0x9E3779B97F4A7C15ULL + stream);
}

inline Mat gather_rows(const Mat& x, const std::vector<Eigen::Index>& idx,
                       size_t begin, size_t end) {
  Mat out(static_cast<Eigen::Index>(end - begin), x.cols());
  for (size_t i = begin; i < end; ++i)
    out.row(static_cast<Eigen::Index>(i - begin)) = x.row(idx[i]);
  return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<Eigen::Index>& idx,
                                      size_t begin, size_t end) {
  std::vector<int> out(end - begin);
  for (size_t i = begin; i < end; ++i)
    out[i - begin] = labels[static_cast<size_t>(idx[i])];
  return out;
}

}  // namespace detail

struct TrainOutput {
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  std::filesystem::path config_path;
  Checkpoint final_checkpoint;
};

// Trains per the config and writes checkpoint.json, train_log.txt and
// effective_config.json under train.output_dir. On divergence the last
// completed epoch's checkpoint is written before the error propagates.
inline TrainOutput run_training(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path out_dir = cfg.train.output_dir;
  fs::create_directories(out_dir);

  TrainOutput result;
  result.checkpoint_path = out_dir / "checkpoint.json";
  result.log_path = out_dir / "train_log.txt";
  result.config_path = out_dir / "effective_config.json";
  write_file_atomic(result.config_path, experiment_config_to_text(cfg));

  const DatasetBundle data = load_dataset(cfg);

  Rng model_rng = detail::seeded(cfg.train.seed, 0x11);
  Rng attack_rng = detail::seeded(cfg.train.seed, 0x22);
  Rng augment_rng = detail::seeded(cfg.train.seed, 0x33);
  Rng shuffle_rng = detail::seeded(cfg.train.seed, 0x44);

  MgpNetwork net(cfg.model, model_rng);
  PrototypeBank bank = PrototypeBank::random_init(
      cfg.model.num_classes, cfg.model.embed_dim, cfg.loss.sphere_tau,
      cfg.loss.proto_ema, model_rng);

  std::vector<ParamGroup> groups;
  for (const TensorRef& ref : net.parameters()) groups.push_back({ref, ManifoldTag{}});
  RsamOptimizer opt(groups, cfg.optim);
  MgpAttackAdapter adapter(net);
  const LossWeights weights = cfg.loss.weights();

  // Fixed probe batch for the sharpness log line: held-out data, fixed views.
  const Eigen::Index probe_n = std::min<Eigen::Index>(data.id_test.size(), 256);
  ContrastiveViews probe_views;
  if (cfg.train.sharpness_cadence > 0 && probe_n > 0) {
    Rng probe_rng = detail::seeded(cfg.train.seed, 0x55);
    std::vector<int> labels(data.id_test.labels.begin(),
                            data.id_test.labels.begin() + probe_n);
    probe_views = make_contrastive_views(data.id_test.x.topRows(probe_n), labels,
                                         cfg.data.augment, probe_rng);
  }

  Checkpoint last_good = make_checkpoint(net, bank, cfg.train.seed);
  std::string log;
  const Eigen::Index n_train = data.id_train.size();
  std::vector<Eigen::Index> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  // The returned closure outlives this factory call, so it captures the
  // views through a pointer rather than through the parameter reference.
  auto make_closure = [&net, &bank, &cfg, &weights](const ContrastiveViews* views,
                                                    LossBreakdown* first_bd,
                                                    Mat* first_sphere) {
    return [&net, &bank, &cfg, &weights, views, first_bd, first_sphere,
            first = true]() mutable -> double {
      net.zero_grad();
      DualHeadOutput out = net.forward(views->inputs);
      ContrastiveBatch cb{out.ball, views->positives, views->candidates};
      TotalLossResult tl = total_loss(out.logits, out.sphere, cb, views->labels, bank,
                                      cfg.model.ball, weights);
      net.backward(tl.grad_logits, tl.grad_sphere, tl.grad_ball);
      if (first) {
        if (first_bd) *first_bd = tl.breakdown;
        if (first_sphere) *first_sphere = out.sphere;
        first = false;
      }
      return tl.breakdown.total;
    };
  };

  try {
    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
      const double lr =
          cfg.train.lr_schedule == "cosine"
              ? cfg.optim.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / cfg.train.epochs))
              : cfg.optim.lr;
      opt.set_lr(lr);

      std::shuffle(order.begin(), order.end(), shuffle_rng);
      LossBreakdown epoch_mean;
      int batches = 0;
      for (size_t begin = 0; begin < order.size();
           begin += static_cast<size_t>(cfg.train.batch_size)) {
        const size_t end =
            std::min(order.size(), begin + static_cast<size_t>(cfg.train.batch_size));
        Mat bx = detail::gather_rows(data.id_train.x, order, begin, end);
        std::vector<int> by = detail::gather_labels(data.id_train.labels, order, begin, end);

        if (cfg.attack.name != "none") {
          AdversarialBatch adv = generate_attack(bx, by, adapter, cfg.attack, attack_rng);
          if (cfg.train.mix_clean) {
            Mat mixed(bx.rows() * 2, bx.cols());
            mixed << bx, adv.perturbed;
            bx = std::move(mixed);
            std::vector<int> doubled = by;
            doubled.insert(doubled.end(), by.begin(), by.end());
            by = std::move(doubled);
          } else {
            bx = adv.perturbed;
          }
        }

        ContrastiveViews views =
            make_contrastive_views(bx, by, cfg.data.augment, augment_rng);
        LossBreakdown bd;
        Mat sphere_at_theta;
        auto closure = make_closure(&views, &bd, &sphere_at_theta);
        opt.step(closure);
        bank = update_prototypes(bank, sphere_at_theta, views.labels);

        epoch_mean.compactness += bd.compactness;
        epoch_mean.disparity += bd.disparity;
        epoch_mean.hypersphere += bd.hypersphere;
        epoch_mean.hyperbolic += bd.hyperbolic;
        epoch_mean.cross_entropy += bd.cross_entropy;
        epoch_mean.total += bd.total;
        ++batches;
      }
      const double inv = batches > 0 ? 1.0 / batches : 0.0;
      log += "epoch=" + std::to_string(epoch) + " lr=" + format_double(lr) +
             " total=" + format_double(epoch_mean.total * inv) +
             " compactness=" + format_double(epoch_mean.compactness * inv) +
             " disparity=" + format_double(epoch_mean.disparity * inv) +
             " hyperbolic=" + format_double(epoch_mean.hyperbolic * inv) +
             " cross_entropy=" + format_double(epoch_mean.cross_entropy * inv);

      if (cfg.train.sharpness_cadence > 0 && probe_n > 0 &&
          (epoch + 1) % cfg.train.sharpness_cadence == 0) {
        auto probe_closure = make_closure(&probe_views, nullptr, nullptr);
        Rng probe_rng = detail::seeded(cfg.train.seed, 0x66 + epoch);
        const double sharp =
            sharpness_probe(opt.groups(), probe_closure, cfg.train.sharpness_rho,
                            cfg.train.sharpness_trials, &probe_rng);
        log += " sharpness=" + format_double(sharp);
      }
      log += "\n";

      last_good = make_checkpoint(net, bank, cfg.train.seed);
      if (cfg.train.checkpoint_every > 0 &&
          (epoch + 1) % cfg.train.checkpoint_every == 0 &&
          epoch + 1 < cfg.train.epochs) {
        save_checkpoint(last_good,
                        out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".json"));
      }
    }
  } catch (const DivergenceError&) {
    save_checkpoint(last_good, result.checkpoint_path);
    write_file_atomic(result.log_path, log);
    throw;
  }

  save_checkpoint(last_good, result.checkpoint_path);
  write_file_atomic(result.log_path, log);
  result.final_checkpoint = std::move(last_good);
  return result;
}

// Rebuilds a network from a checkpoint (the config must describe the same
// architecture the checkpoint was trained with).
inline std::unique_ptr<MgpNetwork> network_from_checkpoint(const Checkpoint& ck) {
  Rng dummy(0);
  auto net = std::make_unique<MgpNetwork>(ck.backbone, dummy);
  restore_parameters(*net, ck);
  return net;
}

// ID-train embedding bank under the checkpointed model, in chunks.
inline EmbeddingBank build_embedding_bank(MgpNetwork& net, const LabeledData& id_train,
                                          Eigen::Index chunk = 512) {
  EmbeddingBank bank;
  bank.embeddings = Mat(id_train.size(), net.penultimate_dim());
  bank.labels = id_train.labels;
  for (Eigen::Index begin = 0; begin < id_train.size(); begin += chunk) {
    const Eigen::Index end = std::min(id_train.size(), begin + chunk);
    bank.embeddings.middleRows(begin, end - begin) =
        net.embed_for_scoring(id_train.x.middleRows(begin, end - begin));
  }
  return bank;
}

inline std::unique_ptr<Scorer> make_scorer(const ExperimentConfig& cfg,
                                           EmbeddingBank bank) {
  if (cfg.scoring.kind == "knn") {
    const int k = cfg.scoring.knn_k > 0 ? cfg.scoring.knn_k : default_knn_k(bank.size());
    return std::make_unique<KnnScorer>(std::move(bank), k);
  }
  return std::make_unique<MahalanobisScorer>(fit_gaussian(bank, cfg.scoring.maha_ridge));
}

struct EvalOutput {
  EvalReport report;
  std::filesystem::path csv_path;
  std::filesystem::path json_path;
};

// Attack-sweep evaluation: embedding bank from ID train data, one condition
// per eval attack (the no-attack condition named "clean"), AUC / AUC_In /
// AUC_Out per condition, report + histograms written under out_dir. The
// headline AUC and FPR95 columns follow attack.eval_policy (default: both
// sides attacked).
inline EvalOutput run_evaluation(const ExperimentConfig& cfg,
                                 const std::filesystem::path& checkpoint_path,
                                 const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const Checkpoint ck = load_checkpoint(checkpoint_path);
  auto net = network_from_checkpoint(ck);
  MgpAttackAdapter adapter(*net);

  const DatasetBundle data = load_dataset(cfg);
  std::unique_ptr<Scorer> scorer =
      make_scorer(cfg, build_embedding_bank(*net, data.id_train));

  EvalReport report;
  std::vector<std::pair<std::string, ScoreSet>> histograms;
  for (size_t c = 0; c < cfg.eval_attacks.size(); ++c) {
    const std::string& attack_name = cfg.eval_attacks[c];
    AttackConfig acfg = cfg.attack;
    acfg.name = attack_name;
    Rng rng = detail::seeded(ck.seed, 0x1000 + c);
    AucVariants v = adversarial_auc_variants(adapter, *scorer, data.id_test.x,
                                             data.id_test.labels, data.ood_test.x,
                                             acfg, rng);
    const ScoreSet& selected = cfg.attack.eval_policy == "id_only" ? v.in_scores
                               : cfg.attack.eval_policy == "ood_only" ? v.out_scores
                                                                      : v.both_scores;
    EvalRow row;
    row.condition = attack_name == "none" ? "clean" : attack_name;
    row.attack = attack_name;
    row.fpr95 = fpr_at_tpr(selected, 0.95);
    row.auc = auroc(selected);
    row.auc_in = v.auc_in;
    row.auc_out = v.auc_out;
    row.n_id = static_cast<double>(data.id_test.size());
    row.n_ood = static_cast<double>(data.ood_test.size());
    row.seed = static_cast<double>(ck.seed);
    report.rows.push_back(row);
    histograms.emplace_back(row.condition, selected);
  }

  EvalOutput out;
  out.report = std::move(report);
  out.csv_path = out_dir / "report.csv";
  out.json_path = out_dir / "report.json";
  emit_report(out.report, out.csv_path, "csv");
  emit_report(out.report, out.json_path, "json");
  emit_histograms(histograms, out_dir, cfg.histogram_bins);
  write_file_atomic(out_dir / "effective_config.json", experiment_config_to_text(cfg));
  return out;
}

// Sharpness table over checkpoints x rho grid on a fixed held-out batch.
// Returns the emitted text (one CSV row per probe).
inline std::string run_sharpness(const ExperimentConfig& cfg,
                                 const std::vector<std::filesystem::path>& checkpoints,
                                 const std::vector<double>& rho_grid,
                                 const std::filesystem::path& out_path) {
  cfg.validate();
  if (checkpoints.empty()) throw ContractViolation("run_sharpness: no checkpoints");
  const DatasetBundle data = load_dataset(cfg);
  const Eigen::Index probe_n = std::min<Eigen::Index>(data.id_test.size(), 256);
  Rng view_rng = detail::seeded(cfg.train.seed, 0x55);
  std::vector<int> labels(data.id_test.labels.begin(),
                          data.id_test.labels.begin() + probe_n);
  const ContrastiveViews probe_views = make_contrastive_views(
      data.id_test.x.topRows(probe_n), labels, cfg.data.augment, view_rng);
  const LossWeights weights = cfg.loss.weights();

  std::string table = "checkpoint,rho,sharpness\n";
  for (const auto& path : checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    auto net = network_from_checkpoint(ck);
    std::vector<ParamGroup> groups;
    for (const TensorRef& ref : net->parameters()) groups.push_back({ref, ManifoldTag{}});

    auto closure = [&]() -> double {
      net->zero_grad();
      DualHeadOutput out = net->forward(probe_views.inputs);
      ContrastiveBatch cb{out.ball, probe_views.positives, probe_views.candidates};
      TotalLossResult tl = total_loss(out.logits, out.sphere, cb, probe_views.labels,
                                      ck.bank, cfg.model.ball, weights);
      net->backward(tl.grad_logits, tl.grad_sphere, tl.grad_ball);
      return tl.breakdown.total;
    };

    for (double rho : rho_grid) {
      Rng probe_rng = detail::seeded(ck.seed, 0x77);
      const double sharp = sharpness_probe(groups, closure, rho,
                                           cfg.train.sharpness_trials, &probe_rng);
      table += path.filename().string() + "," + format_double(rho) + "," +
               format_double(sharp) + "\n";
    }
  }
  write_file_atomic(out_path, table);
  return table;
}

// Embedding bank of the checkpointed model over the ID train split, written
// in the documented binary format.
inline void run_export_bank(const ExperimentConfig& cfg,
                            const std::filesystem::path& checkpoint_path,
                            const std::filesystem::path& out_path) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  auto net = network_from_checkpoint(ck);
  const DatasetBundle data = load_dataset(cfg);
  save_embedding_bank(build_embedding_bank(*net, data.id_train), out_path);
}

}  // namespace sagd
