#pragma once

#include "surgmotion/autodiff.hpp"
#include "surgmotion/parameters.hpp"
#include "surgmotion/types.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace surgmotion {

/// How per-frame latent codes start: i.i.d. normal, or smooth in time.
enum class LatentInit { gaussian, temporal };

struct ModelConfig {
  int num_frames = 2;
  int coupling_layers = 6;
  int conditioner_hidden = 64;
  int conditioner_depth = 2;  // hidden layers per conditioner
  int latent_dim = 16;
  int canonical_hidden = 64;
  int canonical_depth = 2;
  int encoding_octaves = 4;
  double max_log_scale = 6.0;
  double latent_init_std = 1.0;
  LatentInit latent_init = LatentInit::temporal;
  /// Opacity accumulated along a full ray by the initial (uniform) density.
  double initial_opacity = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Parameter blocks of one fully connected network (weights are out x in).
struct MlpBlocks {
  std::vector<int> weights;
  std::vector<int> biases;
};

/// Per-frame invertible maps into a canonical volume plus the canonical
/// density/color network.
///
/// Frame i's map T_i is a stack of affine coupling layers. Layer l rewrites
/// coordinate l mod 3 as x * exp(log_s) + t, where (log_s, t) come from a
/// conditioner network fed the two untouched coordinates and the frame latent
/// psi_i. log_s is squashed to [-max_log_scale, max_log_scale]. With the
/// conditioners' output layers at zero every T_i is the identity.
template <typename Scalar>
class MotionModel {
 public:
  explicit MotionModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  int num_frames() const { return config_.num_frames; }
  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }

  /// Binds the model's parameters to one tape. With a mutable model the
  /// parameters are leaves that receive gradients; with a const model they
  /// are constants.
  class Graph {
   public:
    Graph(ad::Tape<Scalar>& tape, MotionModel& model);
    Graph(ad::Tape<Scalar>& tape, const MotionModel& model);

    ad::Tape<Scalar>& tape() { return *tape_; }

    /// Latent columns for each column's frame, (latent_dim x n).
    ad::Var<Scalar> latents_for(const std::vector<int>& frame_of_col);
    /// u = T_frame(x) column-wise for 3 x n points.
    ad::Var<Scalar> to_canonical(ad::Var<Scalar> x, ad::Var<Scalar> psi);
    /// x = T_frame^{-1}(u) column-wise.
    ad::Var<Scalar> from_canonical(ad::Var<Scalar> u, ad::Var<Scalar> psi);
    /// (sigma: 1 x n, color: 3 x n) at canonical points.
    std::pair<ad::Var<Scalar>, ad::Var<Scalar>> query(ad::Var<Scalar> u);

   private:
    struct Layer {
      std::vector<ad::Var<Scalar>> weights;
      std::vector<ad::Var<Scalar>> biases;
    };
    ad::Var<Scalar> mlp(const Layer& net, ad::Var<Scalar> input) const;
    // (log_s, t) of coupling layer l
    std::pair<ad::Var<Scalar>, ad::Var<Scalar>> conditioner(int layer, ad::Var<Scalar> points, ad::Var<Scalar> psi);
    void bind(const MotionModel& model, bool track);

    ad::Tape<Scalar>* tape_;
    const MotionModel* model_;
    ParameterStore<Scalar>* store_ = nullptr;
    std::vector<Layer> couplings_;
    Layer canonical_;
    ad::Var<Scalar> latents_;
  };

  Vec3<Scalar> map_to_canonical(const Vec3<Scalar>& x, int frame) const;
  Vec3<Scalar> map_from_canonical(const Vec3<Scalar>& u, int frame) const;
  /// x_j = T_dst^{-1}(T_src(x))
  Vec3<Scalar> map_between(const Vec3<Scalar>& x, int src, int dst) const;
  std::pair<Scalar, Vec3<Scalar>> query_canonical(const Vec3<Scalar>& u) const;

  /// Batched variants over 3 x n matrices; all columns share one frame.
  Matrix<Scalar> map_to_canonical(const Matrix<Scalar>& x, int frame) const;
  Matrix<Scalar> map_from_canonical(const Matrix<Scalar>& u, int frame) const;

  const MlpBlocks& coupling_blocks(int layer) const { return couplings_[layer]; }
  const MlpBlocks& canonical_blocks() const { return canonical_; }
  int latent_block() const { return latents_; }

  /// Converts parameters to another precision.
  template <typename Other>
  MotionModel<Other> cast() const {
    MotionModel<Other> out(config_);
    out.params().values() = params_.values().template cast<Other>();
    return out;
  }

 private:
  void initialize();

  ModelConfig config_;
  ParameterStore<Scalar> params_;
  std::vector<MlpBlocks> couplings_;
  MlpBlocks canonical_;
  int latents_ = -1;
};

/// Kept coordinate indices of coupling layer l (the other is transformed).
std::pair<int, int> kept_coordinates(int layer);
inline int transformed_coordinate(int layer) { return layer % 3; }

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the versioned binary checkpoint (see docs/checkpoint_format.md).
template <typename Scalar>
void save_checkpoint(const MotionModel<Scalar>& model, const std::filesystem::path& file);
template <typename Scalar>
MotionModel<Scalar> load_checkpoint(const std::filesystem::path& file);

extern template class MotionModel<float>;
extern template class MotionModel<double>;

}  // namespace surgmotion
