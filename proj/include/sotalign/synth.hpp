#ifndef SOTALIGN_SYNTH_HPP
#define SOTALIGN_SYNTH_HPP

#include <cmath>
#include <cstdint>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/rng.hpp"

namespace sotalign {

/// Two "encoders" observing a shared Gaussian latent through fixed random linear maps.
struct SynthConfig {
  Index latent_dim = 16;
  Index d_x = 48;
  Index d_y = 32;
  Index n_pairs = 200;
  Index n_unpaired = 5000;
  Index n_heldout = 500;
  double noise_std = 0.3;
  bool identity_maps = false;  // P_x = P_y = I, requires d_x = d_y = latent_dim
  // Pool shift in [0, 1]: the unpaired latents lose a fraction `pool_shift` of their
  // variance along the second half of the latent coordinates and gain a matching offset.
  double pool_shift = 0.0;
  std::uint64_t seed = 0;
};

struct SynthData {
  Matrix paired_x, paired_y;
  Matrix unpaired_x, unpaired_y;
  Matrix heldout_x, heldout_y;
  Matrix map_x, map_y;  // latent_dim x d
};

namespace detail {

inline Matrix shifted_latents(Index n, Index latent_dim, double shift, Rng& rng) {
  Matrix z = rng.normal_matrix(n, latent_dim);
  if (shift > 0.0) {
    const Index half = latent_dim / 2;
    const double keep = std::sqrt(1.0 - shift);
    for (Index c = half; c < latent_dim; ++c) z.col(c) = z.col(c).array() * keep + std::sqrt(shift) * 1.5;
  }
  return z;
}

}  // namespace detail

inline SynthData make_synthetic(const SynthConfig& cfg) {
  if (cfg.latent_dim < 1 || cfg.d_x < 1 || cfg.d_y < 1 || cfg.n_pairs < 1 || cfg.n_unpaired < 1 ||
      cfg.n_heldout < 0)
    throw ParameterError("synth: sizes must be positive");
  if (!(cfg.noise_std >= 0.0)) throw ParameterError("synth: noise_std must be non-negative");
  if (!(cfg.pool_shift >= 0.0 && cfg.pool_shift <= 1.0)) throw ParameterError("synth: pool_shift must be in [0, 1]");
  if (cfg.identity_maps && (cfg.d_x != cfg.latent_dim || cfg.d_y != cfg.latent_dim))
    throw ParameterError("synth: identity maps need d_x = d_y = latent_dim");

  Rng root(cfg.seed);
  Rng maps = root.split(0);
  SynthData out;
  if (cfg.identity_maps) {
    out.map_x = Matrix::Identity(cfg.latent_dim, cfg.d_x);
    out.map_y = Matrix::Identity(cfg.latent_dim, cfg.d_y);
  } else {
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
    Rng mx = maps.split(0), my = maps.split(1);
    out.map_x = mx.normal_matrix(cfg.latent_dim, cfg.d_x, s);
    out.map_y = my.normal_matrix(cfg.latent_dim, cfg.d_y, s);
  }

  auto observe = [&](const Matrix& z, const Matrix& map, Rng noise) {
    Matrix x = z * map;
    if (cfg.noise_std > 0.0) x += noise.normal_matrix(x.rows(), x.cols(), cfg.noise_std);
    return x;
  };

  Rng lat = root.split(1), noise = root.split(2);
  Rng lp = lat.split(0), lx = lat.split(1), ly = lat.split(2), lh = lat.split(3);
  const Matrix zp = lp.normal_matrix(cfg.n_pairs, cfg.latent_dim);
  out.paired_x = observe(zp, out.map_x, noise.split(0));
  out.paired_y = observe(zp, out.map_y, noise.split(1));
  // Unpaired sides draw independent latents: no row correspondence.
  const Matrix zx = detail::shifted_latents(cfg.n_unpaired, cfg.latent_dim, cfg.pool_shift, lx);
  const Matrix zy = detail::shifted_latents(cfg.n_unpaired, cfg.latent_dim, cfg.pool_shift, ly);
  out.unpaired_x = observe(zx, out.map_x, noise.split(2));
  out.unpaired_y = observe(zy, out.map_y, noise.split(3));
  if (cfg.n_heldout > 0) {
    const Matrix zh = lh.normal_matrix(cfg.n_heldout, cfg.latent_dim);
    out.heldout_x = observe(zh, out.map_x, noise.split(4));
    out.heldout_y = observe(zh, out.map_y, noise.split(5));
  }
  return out;
}

}  // namespace sotalign

#endif  // SOTALIGN_SYNTH_HPP
