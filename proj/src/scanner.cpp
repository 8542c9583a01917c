#include "sts/scanner.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "sts/adam.hpp"
#include "sts/parallel.hpp"

namespace sts {

namespace {

template <typename T>
BasicTensor<T> reparameterize_impl(const BasicTensor<T>& raw) {
  BasicTensor<T> out = raw;
  for (T& v : out.data()) v = T(0.5) * std::tanh(v) + T(0.5);
  return out;
}

template <typename T>
double pairwise_loss_impl(const BasicTensor<T>& probs) {
  if (probs.rank() != 2) throw Error("shape", "pairwise_loss expects an [N,C] matrix");
  if (probs.dim(0) < 2) throw Error("shape", "pairwise_loss needs at least two rows");
  ad::Graph<T> g;
  auto p = g.input("probs", probs.shape());
  auto loss = g.mean(g.l2norm_last_axis(g.pairwise_diff(p)));
  g.set_input(p, probs);
  g.forward();
  return static_cast<double>(g.value(loss).item());
}

struct Geometry {
  std::size_t patch_size = 0;
  std::size_t x = 0, y = 0;
  bool pixel_alpha = false;
  double lambda = 0.0;
};

Geometry geometry_for(const ScanConfig& config, std::size_t height, std::size_t width) {
  Geometry geo;
  if (config.mode.kind == ScanMode::Kind::FixedSize) {
    geo.patch_size = config.mode.size;
    if (config.mode.location) {
      geo.x = config.mode.location->first;
      geo.y = config.mode.location->second;
    } else {
      geo.x = (width - geo.patch_size) / 2;
      geo.y = (height - geo.patch_size) / 2;
    }
  } else {
    geo.patch_size = height;
    geo.pixel_alpha = true;
    geo.lambda = config.mode.lambda;
  }
  return geo;
}

struct ScanGraph {
  ad::Graph<float> g;
  ad::NodeId images = 0, raw_patch = 0, raw_alpha = 0, objective = 0;
};

void build_scan_graph(ScanGraph& sg, const ModelCheckpoint& model, std::size_t batch,
                      const Geometry& geo, const Tensor& raw_patch, const Tensor& raw_alpha) {
  auto& g = sg.g;
  const auto& a = model.arch;
  sg.images = g.input("images", {batch, a.channels, a.height, a.width});
  sg.raw_patch = g.parameter("raw_patch", raw_patch, true);
  sg.raw_alpha = g.parameter("raw_alpha", raw_alpha, true);
  auto patch = g.affine(g.tanh(sg.raw_patch), 0.5, 0.5);
  auto alpha = g.affine(g.tanh(sg.raw_alpha), 0.5, 0.5);
  auto perturbed = g.overlay(sg.images, patch, alpha, geo.x, geo.y);
  auto probs = g.softmax(build_classifier(g, model, perturbed, false));
  sg.objective = g.mean(g.l2norm_last_axis(g.pairwise_diff(probs)));
  if (geo.lambda > 0.0) sg.objective = g.add(sg.objective, g.affine(g.abs_sum(alpha), geo.lambda, 0.0));
}

void gather(const Tensor& images, std::span<const std::size_t> indices, Tensor& out) {
  const std::size_t stride = images.size() / images.dim(0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.raw() + indices[i] * stride, stride, out.raw() + i * stride);
  }
}

RestartResult run_restart(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config,
                          const Geometry& geo, const std::vector<std::size_t>& eval_indices,
                          std::size_t restart) {
  const auto& a = model.arch;
  const std::size_t n = images.dim(0);
  const std::size_t batch = std::min(config.batch, n);
  const std::size_t s = geo.patch_size;

  std::seed_seq seq{config.seed, static_cast<std::uint64_t>(restart), std::uint64_t{0x5ca9}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Tensor raw_patch({a.channels, s, s});
  for (float& v : raw_patch.data()) v = normal(rng);
  Tensor raw_alpha = geo.pixel_alpha ? Tensor({s, s}) : Tensor({1});
  for (float& v : raw_alpha.data()) v = normal(rng);

  ScanGraph train, eval;
  build_scan_graph(train, model, batch, geo, raw_patch, raw_alpha);
  build_scan_graph(eval, model, eval_indices.size(), geo, raw_patch, raw_alpha);
  {
    Tensor batch_images({eval_indices.size(), a.channels, a.height, a.width});
    gather(images, eval_indices, batch_images);
    eval.g.set_input(eval.images, std::move(batch_images));
  }
  Tensor& patch_var = train.g.parameter_value(train.raw_patch);
  Tensor& alpha_var = train.g.parameter_value(train.raw_alpha);
  auto evaluate = [&] {
    eval.g.parameter_value(eval.raw_patch) = patch_var;
    eval.g.parameter_value(eval.raw_alpha) = alpha_var;
    eval.g.forward();
    return static_cast<double>(eval.g.value(eval.objective).item());
  };

  RestartResult r;
  r.restart = restart;
  r.initial_loss = evaluate();
  double best = r.initial_loss, best_at_window_start = best;
  Tensor best_patch = patch_var, best_alpha = alpha_var;

  ad::AdamState<float> adam;
  adam.config.lr = config.lr;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Tensor batch_images({batch, a.channels, a.height, a.width});
  r.trajectory.reserve(config.steps);

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(order[i], order[pick(rng)]);
    }
    gather(images, std::span(order).first(batch), batch_images);
    train.g.set_input(train.images, batch_images);
    train.g.forward();
    r.trajectory.push_back(static_cast<double>(train.g.value(train.objective).item()));
    train.g.backward(train.objective);
    Tensor* params[] = {&patch_var, &alpha_var};
    const Tensor* grads[] = {&train.g.gradient(train.raw_patch), &train.g.gradient(train.raw_alpha)};
    ad::adam_step<float>(params, grads, adam);
    r.steps_run = step + 1;

    const bool checkpoint = (step + 1) % config.plateau_window == 0 || step + 1 == config.steps;
    if (!checkpoint) continue;
    const double e = evaluate();
    if (e < best) {
      best = e;
      best_patch = patch_var;
      best_alpha = alpha_var;
    }
    if (config.early_exit && (step + 1) % config.plateau_window == 0) {
      if (best_at_window_start - best < config.plateau_tolerance) break;
      best_at_window_start = best;
    }
  }

  r.final_loss = best;
  r.trigger.size = s;
  r.trigger.patch = reparameterize(best_patch);
  r.trigger.alpha = reparameterize(best_alpha);
  r.trigger.placement = Placement::fixed(geo.x, geo.y);
  r.trigger.seed = config.seed;
  return r;
}

const char* mode_name(ScanMode::Kind k) {
  return k == ScanMode::Kind::FixedSize ? "fixed_size" : "regularized";
}

}  // namespace

Tensor reparameterize(const Tensor& raw) { return reparameterize_impl(raw); }
Tensor64 reparameterize(const Tensor64& raw) { return reparameterize_impl(raw); }

double pairwise_loss(const Tensor64& probs) { return pairwise_loss_impl(probs); }
double pairwise_loss(const Tensor& probs) { return pairwise_loss_impl(probs); }

void ScanConfig::validate(std::size_t height, std::size_t width) const {
  if (restarts < 1) throw Error("config", "restarts must be at least 1");
  if (batch < 2) throw Error("config", "scan batch must be at least 2");
  if (eval_batch < 2) throw Error("config", "eval batch must be at least 2");
  if (plateau_window < 1) throw Error("config", "plateau window must be at least 1");
  if (!(lr > 0.0)) throw Error("config", "learning rate must be positive");
  if (mode.kind == ScanMode::Kind::FixedSize) {
    if (mode.size < 1 || mode.size > std::min(height, width)) {
      throw Error("bounds", "trigger size " + std::to_string(mode.size) + " does not fit a " +
                                std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    if (mode.location &&
        (mode.location->first + mode.size > width || mode.location->second + mode.size > height)) {
      throw Error("bounds", "scan location places the patch outside the image");
    }
  } else {
    if (!(mode.lambda >= 0.0)) throw Error("config", "lambda must be non-negative");
    if (height != width) throw Error("shape", "regularized scan needs square images");
  }
}

ScanResult scan(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config) {
  const auto& a = model.arch;
  a.validate();
  if (images.rank() != 4 || images.dim(1) != a.channels || images.dim(2) != a.height ||
      images.dim(3) != a.width) {
    throw Error("shape", "scan images " + shape_string(images.shape()) + " do not match the model");
  }
  if (images.dim(0) < 2) throw Error("empty", "scanning needs at least two images");
  config.validate(a.height, a.width);
  const Geometry geo = geometry_for(config, a.height, a.width);

  std::vector<std::size_t> eval_indices(images.dim(0));
  std::iota(eval_indices.begin(), eval_indices.end(), 0);
  {
    std::seed_seq seq{config.seed, std::uint64_t{0xe7a1}};
    std::mt19937_64 rng(seq);
    std::shuffle(eval_indices.begin(), eval_indices.end(), rng);
    eval_indices.resize(std::min(config.eval_batch, images.dim(0)));
  }

  const auto start = std::chrono::steady_clock::now();
  ScanResult result;
  result.mode = config.mode;
  result.restarts.resize(config.restarts);
  parallel_for(config.restarts, config.workers, [&](std::size_t r) {
    result.restarts[r] = run_restart(model, images, config, geo, eval_indices, r);
  });
  for (std::size_t r = 1; r < result.restarts.size(); ++r) {
    if (result.restarts[r].final_loss < result.restarts[result.best].final_loss) result.best = r;
  }
  result.wallclock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

ScanResult scan_fixed_size(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config) {
  if (config.mode.kind != ScanMode::Kind::FixedSize) throw Error("config", "expected a fixed-size scan mode");
  return scan(model, images, config);
}

ScanResult scan_regularized(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config) {
  if (config.mode.kind != ScanMode::Kind::Regularized) throw Error("config", "expected a regularized scan mode");
  return scan(model, images, config);
}

nlohmann::json to_json(const ScanResult& result, bool include_timing) {
  nlohmann::json mode = {{"kind", mode_name(result.mode.kind)}};
  if (result.mode.kind == ScanMode::Kind::FixedSize) {
    mode["size"] = result.mode.size;
  } else {
    mode["lambda"] = result.mode.lambda;
  }
  nlohmann::json restarts = nlohmann::json::array();
  for (const auto& r : result.restarts) {
    restarts.push_back({{"restart", r.restart},
                        {"initial_loss", r.initial_loss},
                        {"final_loss", r.final_loss},
                        {"steps_run", r.steps_run},
                        {"trajectory", r.trajectory}});
  }
  nlohmann::json j = {{"mode", mode},
                      {"best_restart", result.best},
                      {"final_loss", result.final_loss()},
                      {"restarts", restarts}};
  if (include_timing) j["wallclock_seconds"] = result.wallclock_seconds;
  return j;
}

}  // namespace sts
