#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dpnav/accountant.hpp"
#include "dpnav/augment.hpp"
#include "dpnav/config.hpp"
#include "dpnav/dp.hpp"
#include "dpnav/imu.hpp"
#include "dpnav/metrics.hpp"
#include "dpnav/model.hpp"
#include "dpnav/tensor.hpp"

namespace dpnav {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// loss functions

// L = mean over rows of ||pred - target||^2 plus the mean absolute
// per-component error; both terms carry weight 1.
inline Tensor training_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.ndim() != 2)
    throw TrainError("loss: pred and target must both be [B,2]");
  double rows = static_cast<double>(pred.dim(0));
  double elems = static_cast<double>(pred.size());
  Tensor d = sub(tape, pred, target);
  Tensor mse = scale(tape, sum(tape, mul(tape, d, d)), 1.0 / rows);
  Tensor l1 = scale(tape, sum(tape, abs(tape, d)), 1.0 / elems);
  return add(tape, mse, l1);
}

// Evaluation-time diagnostic: mean over sliding windows of the squared norm
// of the cumulative velocity-error integral.
inline double windowed_cumulative_loss(const std::vector<Vec2>& preds,
                                       const std::vector<Vec2>& targets, double dt,
                                       int window) {
  if (preds.size() != targets.size())
    throw TrainError("cumulative loss: length mismatch");
  if (window < 1 || static_cast<std::size_t>(window) > preds.size())
    throw TrainError("cumulative loss: bad window");
  std::size_t m = preds.size() - static_cast<std::size_t>(window) + 1;
  double acc = 0.0;
  for (std::size_t t = 0; t < m; ++t) {
    Vec2 c{0.0, 0.0};
    for (int i = 0; i < window; ++i) {
      Vec2 d = preds[t + static_cast<std::size_t>(i)] - targets[t + static_cast<std::size_t>(i)];
      c = c + d * dt;
    }
    acc += c.x * c.x + c.y * c.y;
  }
  return acc / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  ModelConfig model = ModelConfig::preset("nano");
  std::string preset = "nano";
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD momentum beta
  double sched_factor = 0.1;
  int sched_patience = 10;
  bool dp_enabled = false;
  DpConfig dp;
  bool aug_enabled = false;
  AugmentConfig aug;
  std::uint64_t seed = 0;
  std::vector<std::string> train_files;
  std::vector<std::string> val_files;
  // synthetic dataset used when no files are given
  int synth_train = 40;
  int synth_val = 10;
  double synth_duration = 12.0;
  std::string synth_profile = "walk";
  std::uint64_t synth_seed = 1234;
  int window_length = 200;
  int window_stride = 10;
  double rate_hz = 200.0;
  double rte_interval_s = 60.0;
  double sc_window_s = 5.0;
  std::string out_dir;

  static TrainConfig from_kv(const KvConfig& kv) {
    TrainConfig c;
    c.preset = kv.get_str("model.preset", c.preset);
    c.model = ModelConfig::preset(c.preset);
    c.model.droppath_rate = kv.get_double("model.droppath", c.model.droppath_rate);
    c.epochs = static_cast<int>(kv.get_int("train.epochs", c.epochs));
    c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
    c.lr = kv.get_double("train.lr", c.lr);
    c.momentum = kv.get_double("train.momentum", c.momentum);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 0));
    c.sched_factor = kv.get_double("sched.factor", c.sched_factor);
    c.sched_patience = static_cast<int>(kv.get_int("sched.patience", c.sched_patience));
    c.dp_enabled = kv.get_bool("dp.enabled", false);
    c.dp.rank_k = static_cast<int>(kv.get_int("dp.k", c.dp.rank_k));
    c.dp.sigma = kv.get_double("dp.sigma", c.dp.sigma);
    c.dp.clip_init = kv.get_double("dp.clip_init", c.dp.clip_init);
    c.dp.momentum = kv.get_double("dp.momentum", c.dp.momentum);
    c.dp.delta = kv.get_double("dp.delta", c.dp.delta);
    c.dp.weights = weight_scheme_from_string(kv.get_str("dp.weights", "gradient_svd"));
    c.dp.seed = static_cast<std::uint64_t>(kv.get_int("dp.seed", 0));
    c.aug_enabled = kv.get_bool("aug.enabled", false);
    c.aug.theta_max = kv.get_double("aug.theta_max", c.aug.theta_max);
    c.aug.delta_s = kv.get_double("aug.delta_s", c.aug.delta_s);
    c.aug.delta_k = kv.get_double("aug.delta_k", c.aug.delta_k);
    c.aug.noise_sigma = kv.get_double("aug.sigma", c.aug.noise_sigma);
    c.aug.seed = static_cast<std::uint64_t>(kv.get_int("aug.seed", 0));
    if (kv.has("data.train")) c.train_files = split_paths(kv.get_str("data.train", ""));
    if (kv.has("data.val")) c.val_files = split_paths(kv.get_str("data.val", ""));
    c.synth_train = static_cast<int>(kv.get_int("data.synth_train", c.synth_train));
    c.synth_val = static_cast<int>(kv.get_int("data.synth_val", c.synth_val));
    c.synth_duration = kv.get_double("data.synth_duration", c.synth_duration);
    c.synth_profile = kv.get_str("data.synth_profile", c.synth_profile);
    c.synth_seed = static_cast<std::uint64_t>(kv.get_int("data.synth_seed", 1234));
    c.window_length = static_cast<int>(kv.get_int("data.window_length", c.window_length));
    c.window_stride = static_cast<int>(kv.get_int("data.window_stride", c.window_stride));
    c.rate_hz = kv.get_double("data.rate_hz", c.rate_hz);
    c.rte_interval_s = kv.get_double("metrics.rte_interval_s", c.rte_interval_s);
    c.sc_window_s = kv.get_double("metrics.sc_window_s", c.sc_window_s);
    c.out_dir = kv.get_str("train.out_dir", "");
    return c;
  }

 private:
  static std::vector<std::string> split_paths(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == ',' || ch == ';') {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }
};

// ---------------------------------------------------------------------------
// dataset assembly

struct WindowPool {
  WindowBatch all;                                // pooled windows
  std::vector<std::pair<int, int>> seq_ranges;    // per-sequence [begin, end)
};

inline void pool_append(WindowPool& pool, const WindowBatch& wb) {
  if (pool.all.count == 0) {
    pool.all.length = wb.length;
    pool.all.dt = wb.dt;
  }
  int begin = pool.all.count;
  pool.all.count += wb.count;
  pool.all.features.insert(pool.all.features.end(), wb.features.begin(), wb.features.end());
  pool.all.targets.insert(pool.all.targets.end(), wb.targets.begin(), wb.targets.end());
  pool.seq_ranges.emplace_back(begin, pool.all.count);
}

inline WindowBatch windows_from_file(const std::string& path, const TrainConfig& cfg) {
  ImuSequence seq = load_csv(path);
  seq = resample(seq, cfg.rate_hz);
  seq = align_to_global(seq);
  return make_windows(seq, cfg.window_length, cfg.window_stride);
}

inline WindowBatch windows_from_synth(std::uint64_t seed, const TrainConfig& cfg) {
  ImuSequence seq = synth_trajectory(seed, cfg.synth_duration,
                                     profile_from_string(cfg.synth_profile));
  seq = align_to_global(seq);
  return make_windows(seq, cfg.window_length, cfg.window_stride);
}

inline void build_dataset(const TrainConfig& cfg, WindowPool& train, WindowPool& val) {
  if (!cfg.train_files.empty()) {
    for (const auto& p : cfg.train_files) pool_append(train, windows_from_file(p, cfg));
    for (const auto& p : cfg.val_files) pool_append(val, windows_from_file(p, cfg));
  } else {
    for (int i = 0; i < cfg.synth_train; ++i)
      pool_append(train, windows_from_synth(cfg.synth_seed + static_cast<std::uint64_t>(i), cfg));
    for (int i = 0; i < cfg.synth_val; ++i)
      pool_append(val, windows_from_synth(cfg.synth_seed + 100000 + static_cast<std::uint64_t>(i), cfg));
  }
  if (train.all.count == 0) throw TrainError("train: dataset is empty");
  if (cfg.batch_size > train.all.count)
    throw TrainError("train: batch_size exceeds dataset size");
}

// Deterministic shuffle order for one epoch.
inline std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::substream(seed, "shuffle", static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

// Copies the selected windows into model input tensors, applying per-window
// augmentation streams when enabled.
inline void assemble_batch(const WindowPool& pool, std::span<const int> idx,
                           const TrainConfig& cfg, int epoch, Tensor& features,
                           Tensor& targets) {
  int L = pool.all.length;
  int B = static_cast<int>(idx.size());
  features = Tensor({B, 6, L});
  targets = Tensor({B, 2});
  std::size_t fs = static_cast<std::size_t>(6) * L;
  for (int b = 0; b < B; ++b) {
    int w = idx[static_cast<std::size_t>(b)];
    WindowBatch one;
    one.count = 1;
    one.length = L;
    one.dt = pool.all.dt;
    one.features.assign(pool.all.features.begin() + w * fs,
                        pool.all.features.begin() + (w + 1) * fs);
    one.targets.assign(pool.all.targets.begin() + w * 2,
                       pool.all.targets.begin() + (w + 1) * 2);
    if (cfg.aug_enabled) {
      Rng rng = Rng::substream(cfg.aug.seed, "augment", static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(w));
      Transform2 T = sample_transform(cfg.aug, rng);
      apply_transform(one, T, rng, cfg.aug);
    }
    std::copy(one.features.begin(), one.features.end(),
              features.data() + static_cast<std::size_t>(b) * fs);
    std::copy(one.targets.begin(), one.targets.end(),
              targets.data() + static_cast<std::size_t>(b) * 2);
  }
}

// ---------------------------------------------------------------------------
// evaluation helpers

inline std::vector<Vec2> predict_windows(ModelParams& P, const ModelConfig& cfg,
                                         const WindowBatch& pool, int begin, int end,
                                         int batch_size) {
  std::vector<Vec2> preds;
  preds.reserve(static_cast<std::size_t>(end - begin));
  Rng dummy(0);
  std::size_t fs = static_cast<std::size_t>(6) * pool.length;
  for (int start = begin; start < end; start += batch_size) {
    int b = std::min(batch_size, end - start);
    Tensor features({b, 6, pool.length});
    std::copy(pool.features.begin() + start * fs, pool.features.begin() + (start + b) * fs,
              features.data());
    Tape tape(false);
    Tensor out = convxformer_forward(tape, P, cfg, features, false, dummy);
    for (int i = 0; i < b; ++i)
      preds.push_back({out.data()[static_cast<std::size_t>(i) * 2],
                       out.data()[static_cast<std::size_t>(i) * 2 + 1]});
  }
  return preds;
}

struct EvalMetrics {
  double ate = 0.0;
  double rte = 0.0;
  double sc = 0.0;
  double sc_drift = 0.0;
};

// Mean metrics over the pool's sequences: predicted window velocities are
// integrated against the target velocities at the window spacing. When a
// trajectory is shorter than the configured RTE interval, the interval falls
// back to half the trajectory span.
inline EvalMetrics evaluate_pool(ModelParams& P, const ModelConfig& cfg,
                                 const WindowPool& pool, const TrainConfig& tc) {
  EvalMetrics m;
  int seqs = 0;
  double dt = pool.all.dt * tc.window_stride;
  for (auto [begin, end] : pool.seq_ranges) {
    if (end - begin < 2) continue;
    auto preds = predict_windows(P, cfg, pool.all, begin, end, tc.batch_size);
    std::vector<Vec2> targets(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i)
      targets[static_cast<std::size_t>(i - begin)] = {
          pool.all.targets[static_cast<std::size_t>(i) * 2],
          pool.all.targets[static_cast<std::size_t>(i) * 2 + 1]};
    Trajectory est = integrate(preds, dt);
    Trajectory gt = integrate(targets, dt);
    double span = static_cast<double>(est.positions.size() - 1) * dt;
    double interval = std::min(tc.rte_interval_s, 0.5 * span);
    double window = std::min(tc.sc_window_s, 0.5 * span);
    m.ate += ate(est, gt);
    m.rte += rte(est, gt, interval);
    ScaleConsistency sc = scale_consistency(est, gt, window);
    m.sc += sc.sc;
    m.sc_drift += sc.drift_rate;
    ++seqs;
  }
  if (seqs == 0) throw TrainError("evaluate: no usable sequences");
  m.ate /= seqs;
  m.rte /= seqs;
  m.sc /= seqs;
  m.sc_drift /= seqs;
  return m;
}

inline double pool_loss(ModelParams& P, const ModelConfig& cfg, const WindowPool& pool,
                        int batch_size) {
  double acc = 0.0;
  long long nbatches = 0;
  std::size_t fs = static_cast<std::size_t>(6) * pool.all.length;
  Rng dummy(0);
  for (int start = 0; start < pool.all.count; start += batch_size) {
    int b = std::min(batch_size, pool.all.count - start);
    Tensor features({b, 6, pool.all.length});
    Tensor targets({b, 2});
    std::copy(pool.all.features.begin() + start * fs,
              pool.all.features.begin() + (start + b) * fs, features.data());
    std::copy(pool.all.targets.begin() + start * 2,
              pool.all.targets.begin() + (start + b) * 2, targets.data());
    Tape tape(false);
    Tensor out = convxformer_forward(tape, P, cfg, features, false, dummy);
    Tape lt(false);
    acc += training_loss(lt, out, targets).data()[0];
    ++nbatches;
  }
  return acc / static_cast<double>(nbatches);
}

// ---------------------------------------------------------------------------
// training loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ate = 0.0;
  double epsilon = 0.0;
  double lr = 0.0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  double initial_val_ate = 0.0;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  EvalMetrics final_metrics;
  std::uint64_t seed = 0;
  long long steps = 0;
};

inline RunRecord train(const TrainConfig& cfg) {
  cfg.model.validate();
  if (cfg.lr <= 0.0) throw TrainError("train: lr must be positive");
  if (cfg.dp_enabled) cfg.dp.validate();

  WindowPool trainp, valp;
  build_dataset(cfg, trainp, valp);
  bool has_val = valp.all.count > 0;

  ModelParams P = init_params(cfg.model, cfg.seed);
  std::map<std::string, std::vector<double>> velocity;
  P.for_each_trainable([&](const std::string& path, Tensor& t) {
    velocity[path].assign(t.size(), 0.0);
  });
  std::map<std::string, ClipState> clip;
  if (cfg.dp_enabled)
    P.for_each_trainable([&](const std::string& path, Tensor&) {
      clip[path] = ClipState{cfg.dp.clip_init};
    });

  double q = static_cast<double>(cfg.batch_size) / static_cast<double>(trainp.all.count);
  PrivacyLedger ledger(AccountantMode::subsampled_gaussian,
                       cfg.dp_enabled ? cfg.dp.sigma : 1.0, std::min(q, 1.0),
                       cfg.dp_enabled ? cfg.dp.delta : 1e-5);

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.initial_val_ate =
      has_val ? evaluate_pool(P, cfg.model, valp, cfg).ate : 0.0;
  rec.best_val_loss = std::numeric_limits<double>::infinity();

  namespace fs = std::filesystem;
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

  double lr = cfg.lr;
  int plateau_wait = 0;
  long long global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = epoch_order(cfg.seed, epoch, trainp.all.count);
    double loss_acc = 0.0;
    long long nbatches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t bend = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const int> idx(order.data() + start, bend - start);
      Tensor features, targets;
      assemble_batch(trainp, idx, cfg, epoch, features, targets);

      Tape tape;
      Rng droppath_rng = Rng::substream(cfg.seed, "droppath",
                                        static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(global_step));
      Tensor pred, loss;
      try {
        pred = convxformer_forward(tape, P, cfg.model, features, true, droppath_rng);
        loss = training_loss(tape, pred, targets);
      } catch (const TensorError& e) {
        throw TrainError("training diverged at epoch " + std::to_string(epoch) +
                         " step " + std::to_string(global_step) + ": " + e.what());
      }
      loss_acc += loss.data()[0];
      ++nbatches;
      tape.backward(loss);

      P.for_each_trainable([&](const std::string& path, Tensor& t) {
        std::vector<double> g = t.grad();
        if (cfg.dp_enabled) {
          Tensor gt = Tensor::from_data(t.shape(), std::move(g));
          Rng rng = Rng::substream(cfg.dp.seed, path,
                                   static_cast<std::uint64_t>(global_step));
          Tensor noisy = dp_gradient(gt, clip[path], cfg.dp, rng);
          g = noisy.values();
        }
        auto& v = velocity[path];
        for (std::size_t i = 0; i < g.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          t.values()[i] -= lr * v[i];
        }
      });
      P.zero_grads();
      if (cfg.dp_enabled) ledger.accumulate(1);
      ++global_step;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_acc / static_cast<double>(nbatches);
    er.lr = lr;
    if (has_val) {
      er.val_loss = pool_loss(P, cfg.model, valp, cfg.batch_size);
      er.val_ate = evaluate_pool(P, cfg.model, valp, cfg).ate;
    } else {
      er.val_loss = er.train_loss;
      er.val_ate = 0.0;
    }
    er.epsilon = cfg.dp_enabled ? ledger.epsilon().epsilon : 0.0;
    rec.epochs.push_back(er);

    if (er.val_loss < rec.best_val_loss) {
      rec.best_val_loss = er.val_loss;
      rec.best_epoch = epoch;
      plateau_wait = 0;
      if (!cfg.out_dir.empty())
        save_checkpoint((fs::path(cfg.out_dir) / "best.ckpt").string(), P);
    } else {
      ++plateau_wait;
      if (plateau_wait > cfg.sched_patience) {
        lr *= cfg.sched_factor;
        plateau_wait = 0;
      }
    }
  }

  rec.steps = global_step;
  if (has_val) rec.final_metrics = evaluate_pool(P, cfg.model, valp, cfg);
  if (!cfg.out_dir.empty())
    save_checkpoint((fs::path(cfg.out_dir) / "last.ckpt").string(), P);
  return rec;
}

// ---------------------------------------------------------------------------
// convergence experiment on a strongly convex quadratic

struct ConvergencePoint {
  long long t = 0;
  double mean_error = 0.0;
  double bound = 0.0;
  double mc_slack = 0.0;  // 3 sigma / sqrt(seeds)
};

struct ConvergenceReport {
  std::vector<ConvergencePoint> points;
  int seeds = 0;
  bool within_bound = true;
};

// Noisy gradient descent on f(theta) = 1/2 theta^T A theta with spectrum in
// [mu, L]; per-direction noise std sigma * w_i matches the aligned-noise
// mechanism the bound assumes.
inline ConvergenceReport convergence_experiment(double mu, double L, double eta,
                                                double sigma,
                                                const std::vector<double>& w,
                                                long long T, int seeds,
                                                std::uint64_t seed0 = 7,
                                                double delta0 = 1.0) {
  if (w.empty()) throw TrainError("convergence_experiment: empty weights");
  int d = static_cast<int>(w.size());
  std::vector<double> eig(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i)
    eig[static_cast<std::size_t>(i)] =
        d == 1 ? L : L + (mu - L) * static_cast<double>(i) / (d - 1);

  // theta0 spreads delta0 equally over the eigenmodes
  std::vector<double> theta0(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i)
    theta0[static_cast<std::size_t>(i)] =
        std::sqrt(2.0 * delta0 / (static_cast<double>(d) * eig[static_cast<std::size_t>(i)]));

  std::vector<long long> checkpoints;
  for (long long t = 1; t <= T; t *= 2) checkpoints.push_back(t);
  if (checkpoints.empty() || checkpoints.back() != T) checkpoints.push_back(T);

  std::vector<std::vector<double>> errors(checkpoints.size(),
                                          std::vector<double>(static_cast<std::size_t>(seeds)));
  for (int s = 0; s < seeds; ++s) {
    Rng rng = Rng::substream(seed0, "converge", static_cast<std::uint64_t>(s));
    std::vector<double> theta = theta0;
    std::size_t ci = 0;
    for (long long t = 1; t <= T && ci < checkpoints.size(); ++t) {
      for (int i = 0; i < d; ++i) {
        double noise = w[static_cast<std::size_t>(i)] * rng.gaussian(0.0, sigma);
        theta[static_cast<std::size_t>(i)] -=
            eta * (eig[static_cast<std::size_t>(i)] * theta[static_cast<std::size_t>(i)] + noise);
      }
      if (t == checkpoints[ci]) {
        double f = 0.0;
        for (int i = 0; i < d; ++i)
          f += 0.5 * eig[static_cast<std::size_t>(i)] * theta[static_cast<std::size_t>(i)] *
               theta[static_cast<std::size_t>(i)];
        errors[ci][static_cast<std::size_t>(s)] = f;
        ++ci;
      }
    }
  }

  ConvergenceReport rep;
  rep.seeds = seeds;
  for (std::size_t ci = 0; ci < checkpoints.size(); ++ci) {
    ConvergencePoint p;
    p.t = checkpoints[ci];
    double mean = 0.0;
    for (double e : errors[ci]) mean += e;
    mean /= static_cast<double>(seeds);
    double var = 0.0;
    for (double e : errors[ci]) var += (e - mean) * (e - mean);
    var /= static_cast<double>(seeds > 1 ? seeds - 1 : 1);
    p.mean_error = mean;
    p.bound = convergence_bound(L, mu, eta, sigma, w, p.t, delta0);
    p.mc_slack = 3.0 * std::sqrt(var / static_cast<double>(seeds));
    if (p.mean_error > p.bound + p.mc_slack) rep.within_bound = false;
    rep.points.push_back(p);
  }
  return rep;
}

}  // namespace dpnav
