#pragma once

// Image-side augmentation bank. Every transform maps a valid ImageTensor to a
// valid ImageTensor of the same shape; randomised transforms take an explicit
// Rng so identical (input, spec, seed) gives bit-identical output.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "shape/core.hpp"
#include "shape/rng.hpp"

namespace shape {

struct CropSpec {
  double s_min = 0.2;
  double s_max = 0.5;
  friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

struct DiffusionNoiseSpec {
  int t = 200;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  friend bool operator==(const DiffusionNoiseSpec&, const DiffusionNoiseSpec&) = default;
};

struct ContrastSpec {
  double factor = 2.0;
  friend bool operator==(const ContrastSpec&, const ContrastSpec&) = default;
};

struct GammaSpec {
  double g = 0.8;
  friend bool operator==(const GammaSpec&, const GammaSpec&) = default;
};

struct HFlipSpec {
  friend bool operator==(const HFlipSpec&, const HFlipSpec&) = default;
};

struct IdentitySpec {
  friend bool operator==(const IdentitySpec&, const IdentitySpec&) = default;
};

using AugmentationParams =
    std::variant<CropSpec, DiffusionNoiseSpec, ContrastSpec, GammaSpec, HFlipSpec, IdentitySpec>;

struct AugmentationSpec {
  std::string name;  // preset name, or the kind name for custom params
  AugmentationParams params;
  friend bool operator==(const AugmentationSpec&, const AugmentationSpec&) = default;
};

inline const char* kind_name(const AugmentationParams& p) {
  static constexpr const char* kNames[] = {"crop",  "diffusion", "contrast",
                                           "gamma", "hflip",     "identity"};
  return kNames[p.index()];
}

inline void validate_spec(const AugmentationSpec& spec) {
  const std::string where = "augmentation '" + spec.name + "': ";
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, CropSpec>) {
          if (!(p.s_min > 0.0 && p.s_min <= p.s_max && p.s_max <= 1.0)) {
            throw ValidationError(where + "crop requires 0 < s_min <= s_max <= 1");
          }
        } else if constexpr (std::is_same_v<T, DiffusionNoiseSpec>) {
          if (p.T < 1) throw ValidationError(where + "diffusion T must be >= 1");
          if (p.t < 0 || p.t > p.T) {
            throw ValidationError(where + "diffusion step t=" + std::to_string(p.t) +
                                  " outside [0, " + std::to_string(p.T) + "]");
          }
          if (!(p.beta_start < p.beta_end)) {
            throw ValidationError(where + "diffusion requires beta_start < beta_end");
          }
        } else if constexpr (std::is_same_v<T, ContrastSpec>) {
          if (!(p.factor > 0.0)) throw ValidationError(where + "contrast factor must be > 0");
        } else if constexpr (std::is_same_v<T, GammaSpec>) {
          if (!(p.g > 0.0)) throw ValidationError(where + "gamma must be > 0");
        }
      },
      spec.params);
}

// ---------------------------------------------------------------------------
// Presets

/// Named presets. "crop" is Crop(0.2, 0.5); "crop-0-20" removes up to 20% of
/// the frame (keeps 80-100% of the area), the alternative reading used in the
/// ablation table.
inline std::vector<std::string> preset_names() {
  return {"crop", "crop-0-20", "diffusion-w", "diffusion-s", "contrast",
          "gamma", "hflip",    "identity"};
}

inline AugmentationSpec preset(const std::string& name) {
  if (name == "crop") return {name, CropSpec{0.2, 0.5}};
  if (name == "crop-0-20") return {name, CropSpec{0.8, 1.0}};
  if (name == "diffusion-w") return {name, DiffusionNoiseSpec{200, 1000, 1e-4, 0.02}};
  if (name == "diffusion-s") return {name, DiffusionNoiseSpec{500, 1000, 1e-4, 0.02}};
  if (name == "contrast") return {name, ContrastSpec{2.0}};
  if (name == "gamma") return {name, GammaSpec{0.8}};
  if (name == "hflip") return {name, HFlipSpec{}};
  if (name == "identity") return {name, IdentitySpec{}};
  throw ValidationError("unknown augmentation preset '" + name + "'");
}

/// Named banks. Only candidate-3 has a composition given by the method.
inline std::vector<AugmentationSpec> bank_preset(const std::string& name) {
  if (name == "candidate-3") return {preset("contrast"), preset("diffusion-w"), preset("gamma")};
  throw ValidationError("unknown augmentation bank '" + name + "'");
}

// ---------------------------------------------------------------------------
// Forward diffusion

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[s-1] is the variance of step s
  std::vector<double> alpha_bar;  // alpha_bar[t] = prod_{s<=t} (1 - beta_s)
};

/// Linear beta schedule, inclusive of both endpoints.
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("noise schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start < beta_end)) {
    throw ValidationError("noise schedule needs beta_start < beta_end");
  }
  if (!(beta_start > 0.0) || !(beta_end < 1.0)) {
    throw ValidationError("noise schedule betas must lie in (0, 1)");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
    s.alpha_bar[i + 1] = s.alpha_bar[i] * (1.0 - s.beta[i]);
  }
  return s;
}

/// Pre-clamp forward sample sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. The
/// result may leave [0, 1]; diffuse() is the image-valued version.
inline std::vector<double> diffuse_unclamped(const ImageTensor& img, const DiffusionNoiseSpec& spec,
                                             Rng& rng) {
  validate_image(img);
  if (spec.t < 0 || spec.t > spec.T) {
    throw ValidationError("diffusion step t=" + std::to_string(spec.t) + " exceeds T=" +
                          std::to_string(spec.T));
  }
  std::vector<double> out(img.data);
  if (spec.t == 0) return out;
  const NoiseSchedule sched = build_schedule(spec.T, spec.beta_start, spec.beta_end);
  const double ab = sched.alpha_bar[static_cast<std::size_t>(spec.t)];
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  for (double& v : out) v = signal * v + noise * rng.normal();
  return out;
}

inline ImageTensor diffuse(const ImageTensor& img, const DiffusionNoiseSpec& spec, Rng& rng) {
  ImageTensor out{img.height, img.width, img.channels, diffuse_unclamped(img, spec, rng)};
  if (spec.t == 0) return out;
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Geometric

/// Continuous crop rectangle in pixel units (pixel i covers [i, i+1)).
struct CropRect {
  double x0 = 0, y0 = 0, w = 0, h = 0;
  double area_fraction(int width, int height) const { return (w * h) / (double(width) * height); }
};

inline double sample_bilinear(const ImageTensor& img, double y, double x, int c) {
  y = std::clamp(y, 0.0, double(img.height - 1));
  x = std::clamp(x, 0.0, double(img.width - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
  const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
  return top * (1 - fy) + bot * fy;
}

/// Resamples `rect` back to the full image size with bilinear interpolation.
/// A full-frame rect reproduces the input exactly.
inline ImageTensor resample_rect(const ImageTensor& img, const CropRect& rect) {
  ImageTensor out{img.height, img.width, img.channels, std::vector<double>(img.size())};
  const double sy = rect.h / img.height;
  const double sx = rect.w / img.width;
  for (int y = 0; y < img.height; ++y) {
    const double src_y = rect.y0 + (y + 0.5) * sy - 0.5;
    for (int x = 0; x < img.width; ++x) {
      const double src_x = rect.x0 + (x + 0.5) * sx - 0.5;
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = std::clamp(sample_bilinear(img, src_y, src_x, c), 0.0, 1.0);
      }
    }
  }
  return out;
}

/// Draws the crop rectangle: area fraction uniform in [s_min, s_max], aspect
/// ratio uniform in [3/4, 4/3]. Up to 10 attempts; afterwards a centred crop
/// covering s_max of the area with the image's own aspect ratio.
inline CropRect sample_crop_rect(int width, int height, const CropSpec& spec, Rng& rng) {
  const double area = double(width) * height;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double frac = rng.uniform(spec.s_min, spec.s_max);
    const double aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
    const double w = std::sqrt(frac * area * aspect);
    const double h = std::sqrt(frac * area / aspect);
    if (w < 1.0 || h < 1.0 || w > width || h > height) continue;
    const double x0 = rng.uniform() * (width - w);
    const double y0 = rng.uniform() * (height - h);
    return {x0, y0, w, h};
  }
  const double side = std::sqrt(spec.s_max);
  const double w = width * side;
  const double h = height * side;
  return {(width - w) / 2.0, (height - h) / 2.0, w, h};
}

inline std::pair<ImageTensor, CropRect> crop_with_rect(const ImageTensor& img, const CropSpec& spec,
                                                       Rng& rng) {
  validate_image(img);
  validate_spec({"crop", spec});
  if (img.height < 2 || img.width < 2) {
    throw ValidationError("crop needs an image of at least 2x2");
  }
  const CropRect rect = sample_crop_rect(img.width, img.height, spec, rng);
  return {resample_rect(img, rect), rect};
}

inline ImageTensor crop(const ImageTensor& img, const CropSpec& spec, Rng& rng) {
  return crop_with_rect(img, spec, rng).first;
}

inline ImageTensor hflip(const ImageTensor& img) {
  validate_image(img);
  ImageTensor out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Photometric

/// Mean luma: ITU-R 601 weights for RGB, plain mean for grayscale.
inline double mean_luma(const ImageTensor& img) {
  const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
  double sum = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    if (img.channels == 3) {
      const double* px = &img.data[p * 3];
      sum += 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    } else {
      sum += img.data[p];
    }
  }
  return sum / static_cast<double>(pixels);
}

inline ImageTensor contrast(const ImageTensor& img, double factor) {
  validate_image(img);
  if (!(factor > 0.0)) throw ValidationError("contrast factor must be > 0");
  const double mu = mean_luma(img);
  ImageTensor out = img;
  for (double& v : out.data) v = std::clamp(mu + factor * (v - mu), 0.0, 1.0);
  return out;
}

inline ImageTensor gamma(const ImageTensor& img, double g) {
  validate_image(img);
  if (!(g > 0.0)) throw ValidationError("gamma must be > 0");
  ImageTensor out = img;
  for (double& v : out.data) v = std::pow(v, g);
  return out;
}

// ---------------------------------------------------------------------------

inline ImageTensor apply(const ImageTensor& img, const AugmentationSpec& spec, Rng& rng) {
  validate_spec(spec);
  return std::visit(
      [&](const auto& p) -> ImageTensor {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, CropSpec>) return crop(img, p, rng);
        else if constexpr (std::is_same_v<T, DiffusionNoiseSpec>) return diffuse(img, p, rng);
        else if constexpr (std::is_same_v<T, ContrastSpec>) return contrast(img, p.factor);
        else if constexpr (std::is_same_v<T, GammaSpec>) return gamma(img, p.g);
        else if constexpr (std::is_same_v<T, HFlipSpec>) return hflip(img);
        else return validate_image(img);
      },
      spec.params);
}

/// One output per spec, in spec order. Spec j draws from rng.derive("aug", j)
/// so adding or removing a spec never shifts another spec's stream.
inline std::vector<ImageTensor> apply_bank(const ImageTensor& img,
                                           std::span<const AugmentationSpec> specs,
                                           const Rng& rng) {
  if (specs.empty()) throw ValidationError("augmentation bank is empty");
  std::vector<ImageTensor> out;
  out.reserve(specs.size());
  for (std::size_t j = 0; j < specs.size(); ++j) {
    Rng local = rng.derive("aug", j);
    try {
      out.push_back(apply(img, specs[j], local));
    } catch (const Error& e) {
      throw Error(e.kind(), "augmentation " + std::to_string(j) + " (" + specs[j].name +
                                "): " + e.what());
    }
  }
  return out;
}

}  // namespace shape
