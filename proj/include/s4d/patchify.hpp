#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "s4d/tensor.hpp"

// Shared token space for images and videos. A video is cut into
// tubelet_t x patch_h x patch_w tubelets, flattened row-major
// (t, h, w, c within the tubelet) and linearly projected. An image is a
// single-frame video whose frame is replicated to tubelet depth, so a static
// clip and its still image produce identical tokens.

namespace s4d {

template <typename S>
struct Clip {
  int t = 0, h = 0, w = 0, c = 0;
  std::vector<S> data;  // row-major (t,h,w,c)

  int64_t size() const { return (int64_t)t * h * w * c; }
  S& at(int ti, int hi, int wi, int ci) {
    return data[(((int64_t)ti * h + hi) * w + wi) * c + ci];
  }
  S at(int ti, int hi, int wi, int ci) const {
    return data[(((int64_t)ti * h + hi) * w + wi) * c + ci];
  }
};

using ClipTensor = Clip<float>;

struct GridCoord {
  int t = 0, h = 0, w = 0;
};

struct GridShape {
  int nt = 0, nh = 0, nw = 0;
  int n_tokens() const { return nt * nh * nw; }
  int index(const GridCoord& c) const { return (c.t * nh + c.h) * nw + c.w; }
};

struct PatchGeometry {
  int tubelet_t = 2;
  int patch_h = 8;
  int patch_w = 8;
  int embed_dim = 64;

  int tube_dim(int channels) const { return tubelet_t * patch_h * patch_w * channels; }

  GridShape grid_for(int t, int h, int w) const {
    if (tubelet_t < 1 || patch_h < 1 || patch_w < 1)
      throw std::invalid_argument("patch geometry: extents must be positive");
    if (t % tubelet_t != 0 || h % patch_h != 0 || w % patch_w != 0)
      throw std::invalid_argument("patch geometry: clip dims must be divisible by the patch size");
    return GridShape{t / tubelet_t, h / patch_h, w / patch_w};
  }
};

enum class Modality { image, video };

template <typename S>
struct TokenBatch {
  Tensor<S> tokens;                 // [n, d] projected + position encoded
  std::vector<S> patch_pixels;      // [n, tube_dim] raw flattened tubelets
  std::vector<GridCoord> coords;    // one per token, grid row-major order
  GridShape grid;
  Modality modality = Modality::video;
  int channels = 0;
};

// Repeats the single frame of an image to tubelet depth.
template <typename S>
Clip<S> replicate_image(const Clip<S>& img, const PatchGeometry& geom) {
  if (img.t != 1) throw std::invalid_argument("replicate_image: expected a single-frame clip");
  Clip<S> out;
  out.t = geom.tubelet_t;
  out.h = img.h;
  out.w = img.w;
  out.c = img.c;
  out.data.resize(out.size());
  const int64_t frame = (int64_t)img.h * img.w * img.c;
  for (int ti = 0; ti < out.t; ++ti)
    std::copy_n(img.data.data(), frame, out.data.data() + ti * frame);
  return out;
}

// Flattens tubelets into rows of a [n_tokens, tube_dim] matrix, grid row-major
// over (t, h, w); within a tubelet the order is (t, h, w, c).
template <typename S>
std::vector<S> flatten_tubelets(const Clip<S>& clip, const PatchGeometry& geom) {
  const GridShape grid = geom.grid_for(clip.t, clip.h, clip.w);
  const int td = geom.tube_dim(clip.c);
  std::vector<S> rows((size_t)grid.n_tokens() * td);
  int64_t r = 0;
  for (int gt = 0; gt < grid.nt; ++gt)
    for (int gh = 0; gh < grid.nh; ++gh)
      for (int gw = 0; gw < grid.nw; ++gw) {
        S* row = rows.data() + r * td;
        int64_t k = 0;
        for (int dt = 0; dt < geom.tubelet_t; ++dt)
          for (int dh = 0; dh < geom.patch_h; ++dh)
            for (int dw = 0; dw < geom.patch_w; ++dw)
              for (int ci = 0; ci < clip.c; ++ci)
                row[k++] = clip.at(gt * geom.tubelet_t + dt, gh * geom.patch_h + dh,
                                   gw * geom.patch_w + dw, ci);
        ++r;
      }
  return rows;
}

// Exact inverse of flatten_tubelets.
template <typename S>
Clip<S> detokenize(const std::vector<S>& rows, const PatchGeometry& geom, const GridShape& grid, int channels) {
  const int td = geom.tube_dim(channels);
  if ((int64_t)rows.size() != (int64_t)grid.n_tokens() * td)
    throw std::invalid_argument("detokenize: row buffer does not match grid");
  Clip<S> clip;
  clip.t = grid.nt * geom.tubelet_t;
  clip.h = grid.nh * geom.patch_h;
  clip.w = grid.nw * geom.patch_w;
  clip.c = channels;
  clip.data.resize(clip.size());
  int64_t r = 0;
  for (int gt = 0; gt < grid.nt; ++gt)
    for (int gh = 0; gh < grid.nh; ++gh)
      for (int gw = 0; gw < grid.nw; ++gw) {
        const S* row = rows.data() + r * td;
        int64_t k = 0;
        for (int dt = 0; dt < geom.tubelet_t; ++dt)
          for (int dh = 0; dh < geom.patch_h; ++dh)
            for (int dw = 0; dw < geom.patch_w; ++dw)
              for (int ci = 0; ci < channels; ++ci)
                clip.at(gt * geom.tubelet_t + dt, gh * geom.patch_h + dh,
                        gw * geom.patch_w + dw, ci) = row[k++];
        ++r;
      }
  return clip;
}

// Fixed separable sinusoidal encodings over the (t,h,w) grid. The channel
// budget splits d/4 to the temporal axis and 3d/8 to each spatial axis, each
// chunk filled with interleaved sin/cos ladders; d must be a multiple of 16.
template <typename S>
std::vector<S> position_encoding(const std::vector<GridCoord>& coords, int d) {
  if (d % 16 != 0)
    throw std::invalid_argument("position_encoding: width must be a multiple of 16");
  const int dt = d / 4, dh = 3 * d / 8, dw = dh;
  std::vector<S> enc((size_t)coords.size() * d);
  auto fill = [](S* out, int m, int pos) {
    for (int i = 0; i < m / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / m);
      out[2 * i] = (S)std::sin(pos * freq);
      out[2 * i + 1] = (S)std::cos(pos * freq);
    }
  };
  for (size_t r = 0; r < coords.size(); ++r) {
    S* row = enc.data() + r * d;
    fill(row, dt, coords[r].t);
    fill(row + dt, dh, coords[r].h);
    fill(row + dt + dh, dw, coords[r].w);
  }
  return enc;
}

// Flatten, project, and position-encode a clip into the shared token space.
template <typename S>
TokenBatch<S> tokenize(Graph<S>& g, const Clip<S>& clip, const PatchGeometry& geom,
                       const Tensor<S>& proj_w, const Tensor<S>& proj_b, Modality modality) {
  const GridShape grid = geom.grid_for(clip.t, clip.h, clip.w);
  const int td = geom.tube_dim(clip.c);
  if (proj_w.rank() != 2 || proj_w.dim(0) != td || proj_w.dim(1) != geom.embed_dim)
    throw std::invalid_argument("tokenize: projection shape " + shape_str(proj_w.shape()) +
                                " does not match tubelet dim " + std::to_string(td));
  TokenBatch<S> tb;
  tb.grid = grid;
  tb.modality = modality;
  tb.channels = clip.c;
  tb.patch_pixels = flatten_tubelets(clip, geom);
  tb.coords.reserve(grid.n_tokens());
  for (int gt = 0; gt < grid.nt; ++gt)
    for (int gh = 0; gh < grid.nh; ++gh)
      for (int gw = 0; gw < grid.nw; ++gw) tb.coords.push_back({gt, gh, gw});

  auto pixels = g.constant({grid.n_tokens(), td}, tb.patch_pixels);
  auto projected = add_rowvec(matmul(pixels, proj_w), proj_b);
  auto pos = g.constant({grid.n_tokens(), geom.embed_dim},
                        position_encoding<S>(tb.coords, geom.embed_dim));
  tb.tokens = add(projected, pos);
  return tb;
}

}  // namespace s4d
