#include "cfnet/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "cfnet/errors.hpp"
#include "cfnet/log.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tape.hpp"

namespace cfn {
namespace {

namespace fs = std::filesystem;

constexpr const char* kMetricsSchema = "# cfn.metrics.v1";
constexpr const char* kMetricsColumns = "epoch,lr,train_loss,val_map";

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Shortest round-trippable decimal; identical across runs for identical bits.
std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hash_hex(uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

bool is_fusion_param(const std::string& name) {
  return name.rfind("fusion.", 0) == 0;
}

// SGD with momentum: v <- momentum*v + g, w <- w - group_lr*v. The fusion
// parameter group runs at lr*fusion_mult; parameters that received no
// gradient (streams outside the loss graph) are left untouched.
struct Sgd {
  double momentum = 0.9;
  std::map<std::string, std::vector<double>> velocity;

  void step(Model& m, double lr, double fusion_mult) {
    for (const auto& name : parameter_names(m.cfg)) {
      const Tensor& w = m.param(name);
      if (!w.has_grad()) continue;
      const std::vector<double>& g = w.grad();
      auto [it, inserted] = velocity.try_emplace(name, g.size(), 0.0);
      std::vector<double>& v = it->second;
      if (v.size() != g.size())
        throw InvariantError("optimizer state size mismatch for " + name);
      const double scale = lr * (is_fusion_param(name) ? fusion_mult : 1.0);
      std::vector<double> next(w.values());
      for (size_t i = 0; i < g.size(); ++i) {
        v[i] = momentum * v[i] + g[i];
        next[i] -= scale * v[i];
      }
      m.set_param(name, Tensor(w.shape(), std::move(next), true));
    }
  }
};

class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool append) {
    bool write_header = true;
    if (append && fs::exists(path) && fs::file_size(path) > 0) {
      std::ifstream in(path);
      std::string first;
      std::getline(in, first);
      if (first.rfind("# cfn.metrics.", 0) == 0 && first != kMetricsSchema)
        throw FormatError(FormatError::Kind::BadVersion,
                          path + ": unsupported metrics schema \"" + first + "\"");
      if (first != kMetricsSchema)
        throw FormatError(FormatError::Kind::Corrupt,
                          path + ": existing file is not a metrics log");
      write_header = false;
    }
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw ConfigError("cannot open metrics file " + path);
    if (write_header) out_ << kMetricsSchema << "\n" << kMetricsColumns << "\n";
  }

  void row(int64_t epoch, double lr, double train_loss, double val_map) {
    out_ << epoch << ',' << fmt_g(lr) << ',' << fmt_g(train_loss) << ','
         << fmt_g(val_map) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Forward + loss + backward for one batch; returns the batch mean loss.
// A nonfinite loss dumps every member's sampling grid and aborts.
double train_batch(Model& m, const std::vector<DetectionClip>& clips,
                   const std::vector<int64_t>& order, size_t lo, size_t hi,
                   const std::string& where) {
  Tape tape;
  TapeScope scope(tape);
  std::vector<Tensor> losses;
  std::vector<const DetectionClip*> members;
  std::vector<GridSpec> grids;
  losses.reserve(hi - lo);
  for (size_t k = lo; k < hi; ++k) {
    const DetectionClip& clip = clips[static_cast<size_t>(order[k])];
    ForwardResult fr = forward(m, clip, RunMode::Train);
    losses.push_back(detection_loss(fr.logits, clip.labels));
    members.push_back(&clip);
    grids.push_back(std::move(fr.grid));
  }
  Tensor total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  Tensor batch_loss =
      mul_scalar(total, 1.0 / static_cast<double>(losses.size()));
  const double lval = batch_loss.item();
  if (!std::isfinite(lval)) {
    std::ostringstream dump;
    dump << "nonfinite loss (" << fmt_g(lval) << ") at " << where;
    for (size_t i = 0; i < members.size(); ++i) {
      const GridSpec& gs = grids[i];
      dump << "\ngrid " << members[i]->clip_id << ": j,p,q,s";
      for (int64_t j = 0; j < gs.p.numel(); ++j)
        dump << '\n'
             << j << ',' << fmt_g(gs.p.at(j)) << ',' << fmt_g(gs.q.at(j))
             << ',' << fmt_g(gs.s.at(j));
    }
    log_error(dump.str());
    throw NumericError("nonfinite loss at " + where +
                       "; sampling grids dumped to stderr");
  }
  tape.backward(batch_loss);
  return lval;
}

}  // namespace

EvalReport evaluate(const Model& m, const std::vector<DetectionClip>& clips,
                    EvalMode mode, int threads) {
  if (clips.empty()) throw ConfigError("evaluate: dataset is empty");
  const size_t n = clips.size();
  std::vector<Tensor> logits(n);
  std::vector<Tensor> labels(n);
  auto work = [&](size_t lo, size_t hi) {
    NoTapeScope quiet;
    for (size_t i = lo; i < hi; ++i) {
      logits[i] = forward(m, clips[i], RunMode::Eval).logits;
      labels[i] = clips[i].labels;
    }
  };
  const size_t workers =
      std::clamp<size_t>(static_cast<size_t>(std::max(threads, 1)), 1, n);
  if (workers <= 1) {
    work(0, n);
  } else {
    const size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (size_t w = 0; w < workers; ++w) {
      const size_t lo = std::min(n, w * chunk);
      const size_t hi = std::min(n, lo + chunk);
      pool.emplace_back([&, w, lo, hi] {
        try {
          work(lo, hi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return compute_eval_report(logits, labels, mode);
}

TrainResult run_train(const TrainConfig& cfg) {
  if (cfg.train_dir.empty()) throw ConfigError("train: train_dir is required");
  if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (cfg.overfit_steps < 0)
    throw ConfigError("train: overfit_steps must be >= 0");
  if (!(cfg.lr > 0)) throw ConfigError("train: lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw ConfigError("train: momentum must be in [0, 1)");
  if (!(cfg.fusion_lr_mult > 0))
    throw ConfigError("train: fusion_lr_mult must be positive");
  if (cfg.threads < 1) throw ConfigError("train: threads must be >= 1");
  if (cfg.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (cfg.resume && !cfg.init_checkpoint.empty())
    throw ConfigError("train: resume and init_checkpoint are mutually exclusive");

  std::vector<DetectionClip> train_clips = load_dataset(cfg.train_dir);
  if (train_clips.empty()) throw ConfigError("train: training split is empty");
  if (train_clips[0].labels.dim(0) != cfg.net.num_classes)
    throw ConfigError("train: dataset has " +
                      std::to_string(train_clips[0].labels.dim(0)) +
                      " classes but the network expects " +
                      std::to_string(cfg.net.num_classes));
  std::vector<DetectionClip> val_clips;
  if (!cfg.val_dir.empty()) {
    val_clips = load_dataset(cfg.val_dir);
    if (val_clips.empty())
      throw ConfigError("train: validation split is empty");
    if (val_clips[0].labels.dim(0) != cfg.net.num_classes)
      throw ConfigError("train: validation split has " +
                        std::to_string(val_clips[0].labels.dim(0)) +
                        " classes but the network expects " +
                        std::to_string(cfg.net.num_classes));
  }

  Model m = build(cfg.net);
  const std::string hash = hash_hex(config_hash(cfg.net));
  const std::vector<std::string> names = parameter_names(cfg.net);
  const std::set<std::string> name_set(names.begin(), names.end());

  Sgd opt;
  opt.momentum = cfg.momentum;
  int64_t start_epoch = 0;
  const std::string ckpt_dir = (fs::path(cfg.out_dir) / "checkpoint").string();
  fs::create_directories(cfg.out_dir);

  if (cfg.resume) {
    Checkpoint ck = load_checkpoint(ckpt_dir);
    if (ck.config_hash != hash)
      throw ConfigError("train: checkpoint configuration " + ck.config_hash +
                        " does not match the run configuration " + hash);
    load_params(m, ck.params);
    for (const auto& [name, t] : ck.opt) {
      if (!name_set.count(name))
        throw ConfigError("train: optimizer state for unknown parameter " +
                          name);
      if (t.shape() != m.param(name).shape())
        throw ConfigError("train: optimizer state shape mismatch for " + name);
      opt.velocity[name] = t.values();
    }
    start_epoch = ck.epoch;
  } else if (!cfg.init_checkpoint.empty()) {
    // comma-separated stream checkpoints compose in order; fusion always
    // starts fresh here so its parameter group really is newly initialized
    std::string rest = cfg.init_checkpoint;
    while (!rest.empty()) {
      const size_t cut = rest.find(',');
      std::string path = rest.substr(0, cut);
      rest = cut == std::string::npos ? "" : rest.substr(cut + 1);
      if (path.empty()) continue;
      Checkpoint ck = load_checkpoint(path);
      for (auto it = ck.params.begin(); it != ck.params.end();) {
        if (it->first.rfind("fusion.", 0) == 0) it = ck.params.erase(it);
        else ++it;
      }
      load_params(m, ck.params);
    }
  }

  MetricsWriter metrics((fs::path(cfg.out_dir) / "metrics.csv").string(),
                        cfg.resume);

  auto save = [&](int64_t epochs_done) {
    Checkpoint ck;
    ck.epoch = epochs_done;
    ck.config_hash = hash;
    for (const auto& name : names) ck.params.emplace(name, m.param(name));
    for (const auto& [name, v] : opt.velocity)
      ck.opt.emplace(name, Tensor(m.param(name).shape(), v));
    save_checkpoint(ckpt_dir, ck);
  };

  TrainResult result;
  result.checkpoint_dir = ckpt_dir;

  const size_t n = train_clips.size();
  const size_t bsz =
      static_cast<size_t>(std::min<int64_t>(cfg.batch_size, (int64_t)n));

  if (cfg.overfit_steps > 0) {
    std::vector<int64_t> idx(bsz);
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t step = 0; step < cfg.overfit_steps; ++step) {
      const double loss =
          train_batch(m, train_clips, idx, 0, bsz,
                      "overfit step " + std::to_string(step + 1));
      opt.step(m, cfg.lr, cfg.fusion_lr_mult);
      result.overfit_losses.push_back(loss);
      metrics.row(step + 1, cfg.lr, loss, kNaN);
    }
    result.final_train_loss = result.overfit_losses.back();
    save(0);
    log_info("overfit: " + std::to_string(cfg.overfit_steps) +
             " steps, final loss " + fmt_g(result.final_train_loss));
    return result;
  }

  double last_val = kNaN;
  for (int64_t e = start_epoch; e < cfg.epochs; ++e) {
    int64_t drops = 0;
    for (int64_t ms : cfg.milestones)
      if (e + 1 >= ms) ++drops;
    const double lr_e = cfg.lr * std::pow(0.1, static_cast<double>(drops));

    Rng order_rng = Rng::derive(static_cast<uint64_t>(cfg.seed),
                                "order.epoch." + std::to_string(e));
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    for (size_t lo = 0; lo < n; lo += bsz) {
      const size_t hi = std::min(n, lo + bsz);
      const double l = train_batch(
          m, train_clips, order, lo, hi,
          "epoch " + std::to_string(e + 1) + " batch " +
              std::to_string(lo / bsz + 1));
      opt.step(m, lr_e, cfg.fusion_lr_mult);
      loss_sum += l * static_cast<double>(hi - lo);
    }
    const double train_loss = loss_sum / static_cast<double>(n);

    double val = kNaN;
    if (!val_clips.empty() &&
        ((e + 1) % cfg.eval_every == 0 || e + 1 == cfg.epochs)) {
      val = evaluate(m, val_clips, cfg.eval_mode, cfg.threads).map;
      last_val = val;
    }
    metrics.row(e + 1, lr_e, train_loss, val);
    save(e + 1);
    result.final_train_loss = train_loss;
    ++result.epochs_run;
    std::string line = "epoch " + std::to_string(e + 1) + "/" +
                       std::to_string(cfg.epochs) + " lr " + fmt_g(lr_e) +
                       " loss " + fmt_g(train_loss);
    if (!std::isnan(val)) line += " val_map " + fmt_g(val);
    log_info(line);
  }
  if (result.epochs_run == 0) save(start_epoch);
  result.final_val_map = last_val;
  return result;
}

}  // namespace cfn
