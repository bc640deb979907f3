#pragma once

// Procedural grayscale "faces" for desk-scale experiments. Identity lives in
// face geometry and markings; variations carry pose, lighting, background,
// noise, and expression, all of which are identity-irrelevant.

#include "f2d/image.hpp"
#include "f2d/random.hpp"

#include <Eigen/Dense>

#include <vector>

namespace f2d::synth {

struct FaceIdentity {
  double face_half_width = 9.5;
  double face_half_height = 11.5;
  double skin = 0.65;
  double hair = 0.2;
  double hairline = 4.0;  // rows of hair from the top of the face
  double eye_separation = 4.0;
  double eye_height = 2.5;
  double eye_radius = 1.4;
  double brow_tilt = 0.0;
  double nose_length = 3.0;
  double mouth_width = 4.0;
  double mouth_height = 5.5;
  std::vector<Eigen::Vector3d> marks;  // (dx, dy, intensity delta) relative to center
};

struct FaceVariation {
  double shift_x = 0.0;
  double shift_y = 0.0;
  double scale = 1.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double background = 0.5;
  double background_gradient_x = 0.0;
  double background_gradient_y = 0.0;
  double noise = 0.0;
  double smile = 0.0;       // mouth curvature in [-1, 1]
  double mouth_open = 0.0;  // [0, 1]
  double eye_open = 1.0;    // (0, 1]
  std::uint64_t noise_seed = 0;
};

struct SyntheticFace {
  Image image;
  Eigen::MatrixXd mask;  // 1 inside the face region
};

FaceIdentity random_identity(Rng& rng);
/// `strength` scales every nuisance factor; 0 renders a canonical pose.
FaceVariation random_variation(Rng& rng, double strength = 1.0);

SyntheticFace render_face(const FaceIdentity& id, const FaceVariation& var, int size = 32);

struct LabeledFace {
  SyntheticFace face;
  int identity = 0;
  FaceVariation variation;
};

/// identities x variations faces, ordered identity-major. Identities depend
/// only on `identity_seed`, so a second call with another `variation_seed`
/// yields fresh views of the same people.
std::vector<LabeledFace> make_dataset(int identities, int variations, std::uint64_t identity_seed,
                                      std::uint64_t variation_seed, double strength = 1.0,
                                      int size = 32);

}  // namespace f2d::synth
