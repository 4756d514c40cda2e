#pragma once

#include "urbancad/envmap.hpp"
#include "urbancad/matgraph.hpp"
#include "urbancad/render.hpp"
#include "urbancad/retrieval.hpp"
#include "urbancad/shading.hpp"

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace urbancad {

struct LossWeights {
  double stat = 0.1;
  double vgg = 1.0;
  double rgb = 1.0;
};

struct MeanVar {
  Vec3 mean = Vec3::Zero();
  Vec3 var = Vec3::Zero();  // population variance
};

/// Per-channel statistics over the masked pixels. Throws ValidationError on an
/// empty mask.
MeanVar masked_mean_var(const ImageRGB& image, const Mask& mask);

/// Sum over channels of |mean difference| + |variance difference|. The optional
/// outputs receive the two parts and d(loss)/d(render).
double loss_stat(const ImageRGB& reference, const ImageRGB& render, const Mask& reference_mask, const Mask& cad_mask,
                 double* mean_part = nullptr, double* var_part = nullptr, ImageRGB* d_render = nullptr);

/// G = sum over masked pixels of f f^T / count.
Eigen::MatrixXd gram_matrix(const FeatureMap& features, const Mask& mask);

using FeatureExtractor = std::function<FeatureMap(const ImageRGB&)>;
/// Pullback of an extractor: image cotangent from a feature cotangent.
using FeatureAdjoint = std::function<ImageRGB(const FeatureMap&)>;

/// Sum of absolute entrywise differences of the masked Gram matrices. The
/// gradient needs `adjoint`; the default pair is the built-in bank.
double loss_vgg(const ImageRGB& reference, const ImageRGB& render, const Mask& reference_mask, const Mask& cad_mask,
                const FeatureExtractor& extractor = builtin_features, ImageRGB* d_render = nullptr,
                const FeatureAdjoint& adjoint = builtin_features_adjoint);

/// Mean absolute difference over the overlap pixels and the three channels. An
/// empty overlap gives 0 and a warning.
double loss_rgb(const ImageRGB& reference, const ImageRGB& render, const Mask& overlap,
                Diagnostics* diagnostics = nullptr, ImageRGB* d_render = nullptr);

struct LossTerms {
  double mean = 0.0;
  double var = 0.0;
  double vgg = 0.0;
  double rgb = 0.0;
  double stat() const { return mean + var; }
};

double total_loss(const LossTerms& terms, const LossWeights& weights);
double total_loss(const std::vector<LossTerms>& components, const LossWeights& weights);

enum class LearningRateSchedule { Constant, Cosine };

struct OptimizeConfig {
  int epochs = 300;
  double step_size = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  LearningRateSchedule schedule = LearningRateSchedule::Cosine;
  int texture_resolution = 256;
  bool optimize_body = true;
  bool optimize_wheels = true;
  ParameterPolicy policy;
  LossWeights weights;
  ShadeOptions shading;

  void validate() const;
};

struct EpochLoss {
  int epoch = 0;
  LossTerms terms;
  double total = 0.0;
};

struct LossReport {
  std::vector<EpochLoss> epochs;
  std::map<std::string, std::vector<double>> final_parameters;  // label -> theta
  Diagnostics diagnostics;
};

std::string format_loss_report(const LossReport& report);

/// Everything optimize_materials needs. `reference` is linear RGB; masks are
/// keyed by component label.
struct MaterialProblem {
  TriangleMesh mesh;
  PartAssignment assignment;
  std::map<std::string, MaterialGraph> priors;  // label -> graph
  ImageRGB reference;
  std::map<std::string, Mask> reference_masks;
  RigidTransform model_pose;
  CameraModel camera;
  EnvironmentMap lighting;
};

/// Texture applied to material indices without a label.
TextureSet neutral_material(int resolution);

/// Textures per material index of `mesh`: the graph of the index's label when
/// one is given, else the neutral material.
TextureMap assignment_textures(const TriangleMesh& mesh, const PartAssignment& assignment,
                               const std::map<std::string, MaterialGraph>& graphs, int resolution,
                               Diagnostics* diagnostics = nullptr);

/// Differentiable objective over the continuous parameters of the optimized
/// graphs. Rasterization and, without normal gradients, lighting are cached.
class MaterialObjective {
 public:
  MaterialObjective(MaterialProblem problem, const OptimizeConfig& config);

  /// Labels whose graphs are optimized, in label order.
  const std::vector<std::string>& optimized_labels() const { return labels_; }
  const MaterialProblem& problem() const { return problem_; }
  const RenderBuffers& buffers() const { return buffers_; }

  /// Loss at `theta` (label -> full parameter vector of that graph). When
  /// `gradient` is set it receives d(total)/d(theta) with zeros outside the
  /// optimizable mask.
  double evaluate(const std::map<std::string, std::vector<double>>& theta, LossTerms* terms = nullptr,
                  std::map<std::string, std::vector<double>>* gradient = nullptr,
                  Diagnostics* diagnostics = nullptr) const;

  /// Linear radiance and alpha of the asset with the graphs at `theta`.
  ShadedImage render(const std::map<std::string, std::vector<double>>& theta) const;

  /// Pixels of the rendering covered by material indices assigned to `label`.
  Mask component_mask(const std::string& label) const;

  const std::vector<bool>& optimizable(const std::string& label) const { return mask_.at(label); }
  /// Initial theta of every optimized label.
  std::map<std::string, std::vector<double>> initial_parameters() const;
  const Diagnostics& diagnostics() const { return diagnostics_; }

 private:
  TextureMap textures_at(const std::map<std::string, std::vector<double>>& theta,
                         std::map<std::string, GraphEvaluation>* evaluations, Diagnostics* diagnostics) const;

  MaterialProblem problem_;
  OptimizeConfig config_;
  std::vector<std::string> labels_;
  std::map<std::string, std::vector<bool>> mask_;
  std::map<std::string, Mask> cad_masks_;
  RenderBuffers buffers_;
  LightingCache lighting_;
  bool cached_lighting_ = false;
  TextureMap fixed_textures_;  // unoptimized labels and the neutral default
  Diagnostics diagnostics_;
};

struct OptimizationResult {
  std::map<std::string, MaterialGraph> graphs;
  LossReport report;
};

/// Fits the continuous albedo parameters of the body and wheel graphs with
/// Adam; every other graph is returned unchanged.
OptimizationResult optimize_materials(const MaterialProblem& problem, const OptimizeConfig& config = {});

}  // namespace urbancad
