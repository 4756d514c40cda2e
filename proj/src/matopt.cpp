#include "urbancad/matopt.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace urbancad {

using nlohmann::ordered_json;

namespace {

double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

size_t mask_count(const Mask& m) {
  size_t n = 0;
  for (uint8_t b : m.pixels) n += b ? 1 : 0;
  return n;
}

void require_shape(const ImageRGB& image, const Mask& mask, const char* what) {
  if (!mask.same_shape(image)) throw DimensionError(std::string(what) + ": mask and image differ in resolution");
}

void add_into(ImageRGB& acc, const ImageRGB& g, double scale) {
  if (acc.size() == 0) acc = ImageRGB(g.width, g.height, Vec3::Zero());
  for (size_t i = 0; i < acc.size(); ++i) acc.pixels[i] += scale * g.pixels[i];
}

template <typename T>
void add_image(Image<T>& acc, const Image<T>& g) {
  if (g.size() == 0) return;
  if (acc.size() == 0) {
    acc = g;
    return;
  }
  for (size_t i = 0; i < acc.size(); ++i) acc.pixels[i] += g.pixels[i];
}

void add_cotangent(TextureCotangent& acc, const TextureCotangent& g) {
  add_image(acc.albedo, g.albedo);
  add_image(acc.normal, g.normal);
  add_image(acc.roughness, g.roughness);
  add_image(acc.transmission, g.transmission);
  acc.metallic += g.metallic;
}

}  // namespace

MeanVar masked_mean_var(const ImageRGB& image, const Mask& mask) {
  require_shape(image, mask, "masked_mean_var");
  const size_t n = mask_count(mask);
  if (n == 0) throw ValidationError("masked_mean_var: empty mask (degenerate component)");
  MeanVar mv;
  for (size_t i = 0; i < image.size(); ++i)
    if (mask.pixels[i]) mv.mean += image.pixels[i];
  mv.mean /= double(n);
  for (size_t i = 0; i < image.size(); ++i)
    if (mask.pixels[i]) mv.var += (image.pixels[i] - mv.mean).cwiseAbs2();
  mv.var /= double(n);
  return mv;
}

double loss_stat(const ImageRGB& reference, const ImageRGB& render, const Mask& reference_mask, const Mask& cad_mask,
                 double* mean_part, double* var_part, ImageRGB* d_render) {
  const MeanVar r = masked_mean_var(reference, reference_mask);
  const MeanVar c = masked_mean_var(render, cad_mask);
  const double lm = (c.mean - r.mean).cwiseAbs().sum();
  const double lv = (c.var - r.var).cwiseAbs().sum();
  if (mean_part) *mean_part = lm;
  if (var_part) *var_part = lv;
  if (d_render) {
    *d_render = ImageRGB(render.width, render.height, Vec3::Zero());
    const double n = double(mask_count(cad_mask));
    Vec3 sm, sv;
    for (int k = 0; k < 3; ++k) {
      sm[k] = sign(c.mean[k] - r.mean[k]);
      sv[k] = sign(c.var[k] - r.var[k]);
    }
    for (size_t i = 0; i < render.size(); ++i)
      if (cad_mask.pixels[i])
        d_render->pixels[i] = (sm + 2.0 * sv.cwiseProduct(render.pixels[i] - c.mean)) / n;
  }
  return lm + lv;
}

Eigen::MatrixXd gram_matrix(const FeatureMap& features, const Mask& mask) {
  if (!mask.same_shape(features.width, features.height))
    throw DimensionError("gram_matrix: mask and feature map differ in resolution");
  const size_t n = mask_count(mask);
  if (n == 0) throw ValidationError("gram_matrix: empty mask (degenerate component)");
  const int c = features.channels;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(c, c);
  Eigen::VectorXd f(c);
  for (int y = 0; y < features.height; ++y)
    for (int x = 0; x < features.width; ++x) {
      if (!mask.at(x, y)) continue;
      for (int k = 0; k < c; ++k) f[k] = features.at(k, x, y);
      g.noalias() += f * f.transpose();
    }
  return g / double(n);
}

double loss_vgg(const ImageRGB& reference, const ImageRGB& render, const Mask& reference_mask, const Mask& cad_mask,
                const FeatureExtractor& extractor, ImageRGB* d_render, const FeatureAdjoint& adjoint) {
  const FeatureMap fr = extractor(reference);
  const FeatureMap fc = extractor(render);
  if (fr.channels != fc.channels) throw DimensionError("loss_vgg: extractor channel counts differ");
  const Eigen::MatrixXd gr = gram_matrix(fr, reference_mask);
  const Eigen::MatrixXd gc = gram_matrix(fc, cad_mask);
  const Eigen::MatrixXd diff = gc - gr;
  const double loss = diff.cwiseAbs().sum();
  if (d_render) {
    if (!adjoint) throw ValidationError("loss_vgg: gradient requested without an extractor adjoint");
    const Eigen::MatrixXd s = diff.unaryExpr([](double v) { return sign(v); });
    const Eigen::MatrixXd sym = (s + s.transpose()) / double(mask_count(cad_mask));
    FeatureMap df(fc.width, fc.height, fc.channels);
    Eigen::VectorXd f(fc.channels);
    for (int y = 0; y < fc.height; ++y)
      for (int x = 0; x < fc.width; ++x) {
        if (!cad_mask.at(x, y)) continue;
        for (int k = 0; k < fc.channels; ++k) f[k] = fc.at(k, x, y);
        const Eigen::VectorXd g = sym * f;
        for (int k = 0; k < fc.channels; ++k) df.at(k, x, y) = g[k];
      }
    *d_render = adjoint(df);
  }
  return loss;
}

double loss_rgb(const ImageRGB& reference, const ImageRGB& render, const Mask& overlap, Diagnostics* diagnostics,
                ImageRGB* d_render) {
  require_shape(reference, overlap, "loss_rgb");
  require_shape(render, overlap, "loss_rgb");
  const size_t n = mask_count(overlap);
  if (d_render) *d_render = ImageRGB(render.width, render.height, Vec3::Zero());
  if (n == 0) {
    if (diagnostics) diagnostics->warn("loss_rgb: empty overlap between reference and rendered component");
    return 0.0;
  }
  const double scale = 1.0 / (3.0 * double(n));
  double sum = 0.0;
  for (size_t i = 0; i < render.size(); ++i) {
    if (!overlap.pixels[i]) continue;
    const Vec3 d = render.pixels[i] - reference.pixels[i];
    sum += d.cwiseAbs().sum();
    if (d_render) d_render->pixels[i] = scale * Vec3(sign(d.x()), sign(d.y()), sign(d.z()));
  }
  return sum * scale;
}

double total_loss(const LossTerms& t, const LossWeights& w) {
  return w.stat * t.stat() + w.vgg * t.vgg + w.rgb * t.rgb;
}

double total_loss(const std::vector<LossTerms>& components, const LossWeights& weights) {
  double s = 0.0;
  for (const auto& t : components) s += total_loss(t, weights);
  return s;
}

void OptimizeConfig::validate() const {
  if (epochs < 1) throw ValidationError("optimize: epochs must be at least 1");
  if (!(step_size > 0) || !std::isfinite(step_size)) throw ValidationError("optimize: step size must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ValidationError("optimize: moment decay rates must lie in [0, 1)");
  for (double w : {weights.stat, weights.vgg, weights.rgb})
    if (!(w >= 0) || !std::isfinite(w)) throw ValidationError("optimize: loss weights must be finite and non-negative");
  if (texture_resolution < 1 || texture_resolution > 1024 || (texture_resolution & (texture_resolution - 1)))
    throw ValidationError("optimize: texture resolution must be a power of two no larger than 1024");
}

std::string format_loss_report(const LossReport& report) {
  ordered_json j;
  j["epochs"] = ordered_json::array();
  for (const auto& e : report.epochs) {
    ordered_json row;
    row["epoch"] = e.epoch;
    row["mean"] = e.terms.mean;
    row["var"] = e.terms.var;
    row["stat"] = e.terms.stat();
    row["vgg"] = e.terms.vgg;
    row["rgb"] = e.terms.rgb;
    row["total"] = e.total;
    j["epochs"].push_back(row);
  }
  j["final_parameters"] = ordered_json::object();
  for (const auto& [label, theta] : report.final_parameters) j["final_parameters"][label] = theta;
  j["warnings"] = report.diagnostics.warnings;
  return j.dump(2) + "\n";
}

TextureSet neutral_material(int resolution) {
  TextureSet t;
  t.width = t.height = resolution;
  t.albedo = ImageRGB(resolution, resolution, Vec3::Constant(0.5));
  t.normal = ImageRGB(resolution, resolution, Vec3(0, 0, 1));
  t.roughness = ImageF(resolution, resolution, 0.5);
  t.metallic = 0.0;
  return t;
}

TextureMap assignment_textures(const TriangleMesh& mesh, const PartAssignment& assignment,
                               const std::map<std::string, MaterialGraph>& graphs, int resolution,
                               Diagnostics* diagnostics) {
  std::map<std::string, TextureSet> evaluated;
  TextureMap out;
  for (int index : mesh.material_indices()) {
    const std::string& label = assignment.label_of(index);
    const auto graph = graphs.find(label);
    if (graph == graphs.end()) {
      out[index] = neutral_material(resolution);
      continue;
    }
    auto it = evaluated.find(label);
    if (it == evaluated.end())
      it = evaluated.emplace(label, evaluate_graph(graph->second, resolution, resolution, diagnostics)).first;
    out[index] = it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------

MaterialObjective::MaterialObjective(MaterialProblem problem, const OptimizeConfig& config)
    : problem_(std::move(problem)), config_(config) {
  config_.validate();
  problem_.mesh.validate();
  problem_.camera.validate();
  problem_.lighting.validate();
  if (!problem_.reference.same_shape(problem_.camera.width, problem_.camera.height))
    throw DimensionError("reference image resolution differs from the camera");
  buffers_ = rasterize(problem_.mesh, problem_.model_pose, problem_.camera);

  const int res = config_.texture_resolution;
  for (const std::string& label : {kBody, kWheels}) {
    if (label == kBody && !config_.optimize_body) continue;
    if (label == kWheels && !config_.optimize_wheels) continue;
    if (!problem_.priors.count(label) || problem_.assignment.indices_with(label).empty()) continue;
    Mask cad(buffers_.width, buffers_.height, 0);
    const std::set<int> indices = problem_.assignment.indices_with(label);
    for (size_t i = 0; i < cad.size(); ++i) cad.pixels[i] = indices.count(buffers_.material.pixels[i]) ? 1 : 0;
    const auto ref = problem_.reference_masks.find(label);
    if (ref == problem_.reference_masks.end() || mask_count(ref->second) == 0) {
      diagnostics_.warn("component '" + label + "' has no reference mask; not optimized");
      continue;
    }
    if (!ref->second.same_shape(cad)) throw DimensionError("reference mask '" + label + "' resolution differs");
    if (mask_count(cad) == 0) {
      diagnostics_.warn("component '" + label + "' is not visible in the matched pose; not optimized");
      continue;
    }
    labels_.push_back(label);
    cad_masks_[label] = std::move(cad);
    mask_[label] = optimizable_parameters(problem_.priors.at(label), config_.policy);
  }

  for (int index : problem_.mesh.material_indices()) {
    const std::string& label = problem_.assignment.label_of(index);
    if (mask_.count(label)) continue;
    const auto prior = problem_.priors.find(label);
    fixed_textures_[index] =
        prior == problem_.priors.end() ? neutral_material(res) : evaluate_graph(prior->second, res, res, &diagnostics_);
  }

  cached_lighting_ = !(config_.policy.include_normal || config_.policy.include_roughness);
  if (cached_lighting_) {
    const TextureMap textures = textures_at(initial_parameters(), nullptr, nullptr);
    const ShadeGrid grid = sample_textures(buffers_, textures);
    lighting_ = precompute_lighting(grid, problem_.lighting, problem_.camera, config_.shading);
  }
}

std::map<std::string, std::vector<double>> MaterialObjective::initial_parameters() const {
  std::map<std::string, std::vector<double>> theta;
  for (const auto& label : labels_) theta[label] = problem_.priors.at(label).parameters();
  return theta;
}

Mask MaterialObjective::component_mask(const std::string& label) const {
  const auto it = cad_masks_.find(label);
  if (it != cad_masks_.end()) return it->second;
  Mask m(buffers_.width, buffers_.height, 0);
  const std::set<int> indices = problem_.assignment.indices_with(label);
  for (size_t i = 0; i < m.size(); ++i) m.pixels[i] = indices.count(buffers_.material.pixels[i]) ? 1 : 0;
  return m;
}

TextureMap MaterialObjective::textures_at(const std::map<std::string, std::vector<double>>& theta,
                                          std::map<std::string, GraphEvaluation>* evaluations,
                                          Diagnostics* diagnostics) const {
  TextureMap textures = fixed_textures_;
  const int res = config_.texture_resolution;
  for (const auto& label : labels_) {
    MaterialGraph graph = problem_.priors.at(label);
    std::vector<double> t = graph.parameters();
    const auto it = theta.find(label);
    if (it != theta.end()) {
      if (it->second.size() != t.size())
        throw DimensionError("theta for '" + label + "' has " + std::to_string(it->second.size()) +
                             " entries, graph has " + std::to_string(t.size()));
      const auto& opt = mask_.at(label);
      for (size_t i = 0; i < t.size(); ++i)
        if (opt[i]) t[i] = it->second[i];
    }
    graph.set_parameters(t);
    TextureSet set;
    if (evaluations) {
      GraphEvaluation ev = evaluate_graph_with_grad(graph, res, res, diagnostics);
      set = ev.textures;
      evaluations->emplace(label, std::move(ev));
    } else {
      set = evaluate_graph(graph, res, res, diagnostics);
    }
    for (int index : problem_.assignment.indices_with(label)) textures[index] = set;
  }
  return textures;
}

ShadedImage MaterialObjective::render(const std::map<std::string, std::vector<double>>& theta) const {
  const ShadeGrid grid = sample_textures(buffers_, textures_at(theta, nullptr, nullptr));
  if (cached_lighting_) return shade_cached(grid, lighting_, config_.shading);
  return shade(grid, problem_.lighting, problem_.camera, config_.shading);
}

double MaterialObjective::evaluate(const std::map<std::string, std::vector<double>>& theta, LossTerms* terms,
                                   std::map<std::string, std::vector<double>>* gradient,
                                   Diagnostics* diagnostics) const {
  std::map<std::string, GraphEvaluation> evaluations;
  const TextureMap textures = textures_at(theta, gradient ? &evaluations : nullptr, diagnostics);

  ShadedImage image;
  SampledGrid sampled;
  ShadedWithGrad shaded;
  if (gradient) {
    sampled = sample_textures_with_grad(buffers_, textures);
  } else {
    sampled.pixels = sample_textures(buffers_, textures);
  }
  if (cached_lighting_) {
    image = shade_cached(sampled.pixels, lighting_, config_.shading);
  } else {
    shaded = shade_with_grad(sampled.pixels, problem_.lighting, problem_.camera, config_.shading,
                             config_.policy.include_normal);
    image = shaded.image;
  }

  const LossWeights& w = config_.weights;
  LossTerms sum;
  double total = 0.0;
  ImageRGB d_radiance;
  for (const auto& label : labels_) {
    const Mask& cad = cad_masks_.at(label);
    const Mask& ref = problem_.reference_masks.at(label);
    Mask overlap(cad.width, cad.height, 0);
    for (size_t i = 0; i < overlap.size(); ++i) overlap.pixels[i] = cad.pixels[i] && ref.pixels[i];

    LossTerms t;
    ImageRGB g_stat, g_vgg, g_rgb;
    const bool grad = gradient != nullptr;
    loss_stat(problem_.reference, image.radiance, ref, cad, &t.mean, &t.var, grad ? &g_stat : nullptr);
    t.vgg = loss_vgg(problem_.reference, image.radiance, ref, cad, builtin_features, grad ? &g_vgg : nullptr);
    t.rgb = loss_rgb(problem_.reference, image.radiance, overlap, diagnostics, grad ? &g_rgb : nullptr);
    if (grad) {
      add_into(d_radiance, g_stat, w.stat);
      add_into(d_radiance, g_vgg, w.vgg);
      add_into(d_radiance, g_rgb, w.rgb);
    }
    sum.mean += t.mean;
    sum.var += t.var;
    sum.vgg += t.vgg;
    sum.rgb += t.rgb;
    total += total_loss(t, w);
  }
  if (terms) *terms = sum;

  if (gradient) {
    gradient->clear();
    if (d_radiance.size() == 0) d_radiance = ImageRGB(image.radiance.width, image.radiance.height, Vec3::Zero());
    ShadeCotangent cot;
    if (cached_lighting_)
      cot.albedo = shade_albedo_pullback(sampled.pixels, lighting_, config_.shading, d_radiance);
    else
      cot = shaded.pullback(d_radiance);
    const std::map<int, TextureCotangent> per_index = sampled.pullback(cot);
    for (const auto& label : labels_) {
      TextureCotangent acc;
      for (int index : problem_.assignment.indices_with(label)) {
        const auto it = per_index.find(index);
        if (it != per_index.end()) add_cotangent(acc, it->second);
      }
      std::vector<double> g = evaluations.at(label).pullback(acc);
      const auto& opt = mask_.at(label);
      for (size_t i = 0; i < g.size(); ++i)
        if (!opt[i]) g[i] = 0.0;
      (*gradient)[label] = std::move(g);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------

OptimizationResult optimize_materials(const MaterialProblem& problem, const OptimizeConfig& config) {
  MaterialObjective objective(problem, config);
  OptimizationResult result;
  result.graphs = problem.priors;
  result.report.diagnostics = objective.diagnostics();

  auto theta = objective.initial_parameters();
  std::map<std::string, std::vector<double>> m, v;
  for (const auto& [label, t] : theta) {
    m[label].assign(t.size(), 0.0);
    v[label].assign(t.size(), 0.0);
  }

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    LossTerms terms;
    std::map<std::string, std::vector<double>> grad;
    const double loss = objective.evaluate(theta, &terms, &grad, &result.report.diagnostics);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << "; theta:";
      for (const auto& [label, t] : theta) {
        const auto names = problem.priors.at(label).parameter_names();
        for (size_t i = 0; i < t.size(); ++i) msg << " " << label << ":" << names[i] << "=" << format_double(t[i]);
      }
      throw EvaluationError(msg.str());
    }
    result.report.epochs.push_back({epoch, terms, loss});

    double lr = config.step_size;
    if (config.schedule == LearningRateSchedule::Cosine)
      lr *= 0.5 * (1.0 + std::cos(kPi * double(epoch) / double(config.epochs)));
    const double c1 = 1.0 - std::pow(config.beta1, epoch + 1);
    const double c2 = 1.0 - std::pow(config.beta2, epoch + 1);
    for (auto& [label, t] : theta) {
      const auto& g = grad.at(label);
      const auto& opt = objective.optimizable(label);
      const auto bounds = problem.priors.at(label).parameter_bounds();
      auto& mm = m[label];
      auto& vv = v[label];
      for (size_t i = 0; i < t.size(); ++i) {
        if (!opt[i]) continue;
        mm[i] = config.beta1 * mm[i] + (1 - config.beta1) * g[i];
        vv[i] = config.beta2 * vv[i] + (1 - config.beta2) * g[i] * g[i];
        const double step = lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + config.epsilon);
        t[i] = std::clamp(t[i] - step, bounds[i].first, bounds[i].second);
      }
    }
  }

  for (auto& [label, graph] : result.graphs) {
    const auto it = theta.find(label);
    if (it != theta.end()) graph.set_parameters(it->second);
    result.report.final_parameters[label] = graph.parameters();
  }
  return result;
}

}  // namespace urbancad
