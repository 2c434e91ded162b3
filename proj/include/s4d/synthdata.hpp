#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "s4d/patchify.hpp"
#include "s4d/rng.hpp"

// Deterministic synthetic corpora for the two recognition tasks, plus binary
// tensor file I/O. Classes are rendered as oriented luminance gradients with
// a Gaussian blob whose position (static task) or direction of rotation
// (dynamic task, temporal coding) carries the label.

namespace s4d {

struct SynthSpec {
  int n_classes = 4;
  int samples_per_class = 50;
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int clip_t = 8;
  double noise = 0.05;
  bool temporal_coding = true;
  uint64_t seed = 0;

  void validate() const {
    if (n_classes < 1) throw std::invalid_argument("synth: need at least one class");
    if (samples_per_class < 1) throw std::invalid_argument("synth: need at least one sample per class");
    if (image_h < 4 || image_w < 4) throw std::invalid_argument("synth: image too small");
    if (channels < 1 || channels > 3) throw std::invalid_argument("synth: channels must be 1..3");
    if (clip_t < 2) throw std::invalid_argument("synth: clips need at least two frames");
    if (noise < 0.0) throw std::invalid_argument("synth: negative noise level");
    if (temporal_coding && n_classes % 2 != 0)
      throw std::invalid_argument("synth: temporal coding pairs classes, class count must be even");
  }
};

struct Dataset {
  std::vector<Clip<float>> clips;
  std::vector<int> labels;
  int n_classes = 0;

  int size() const { return (int)clips.size(); }
};

// Gradient orientations are shared by class pairs so that the static and
// coded dynamic corpora have aligned coarse semantics; the blob angle makes
// each static class unique.
inline double class_orientation(int cls, int n_classes) {
  const int n_orient = (n_classes + 1) / 2;
  return std::numbers::pi * (double)(cls / 2) / (double)n_orient;
}

inline double class_blob_angle(int cls, int n_classes) {
  return 2.0 * std::numbers::pi * (double)cls / (double)n_classes;
}

// One frame: luminance ramp along theta plus a Gaussian blob sitting on a
// circle of radius 0.3 (normalized coordinates). Values stay inside [0,1]
// by construction.
inline std::vector<float> render_frame(int h, int w, int channels, double theta,
                                       double blob_angle) {
  constexpr double kRadius = 0.3, kSigma = 0.11;
  constexpr double kAmp[3] = {0.30, 0.20, 0.10};
  const double ct = std::cos(theta), st = std::sin(theta);
  const double bx = kRadius * std::cos(blob_angle), by = kRadius * std::sin(blob_angle);
  std::vector<float> px((size_t)h * w * channels);
  for (int y = 0; y < h; ++y) {
    const double yn = ((double)y + 0.5) / h - 0.5;
    for (int x = 0; x < w; ++x) {
      const double xn = ((double)x + 0.5) / w - 0.5;
      const double base = 0.35 + 0.5 * (xn * ct + yn * st);
      const double d2 = (xn - bx) * (xn - bx) + (yn - by) * (yn - by);
      const double bump = std::exp(-d2 / (2.0 * kSigma * kSigma));
      for (int c = 0; c < channels; ++c) {
        const double v = base + kAmp[c] * bump;
        px[((size_t)y * w + x) * channels + c] = (float)std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return px;
}

inline void add_noise(Clip<float>& clip, double noise, Rng& rng) {
  if (noise <= 0.0) return;
  for (auto& v : clip.data)
    v = (float)std::clamp((double)v + rng.normal(0.0, noise), 0.0, 1.0);
}

namespace detail {

inline Clip<float> clip_from_frames(const std::vector<std::vector<float>>& frames, int h, int w,
                                    int c) {
  Clip<float> clip;
  clip.t = (int)frames.size();
  clip.h = h;
  clip.w = w;
  clip.c = c;
  clip.data.reserve((size_t)clip.size());
  for (const auto& f : frames) clip.data.insert(clip.data.end(), f.begin(), f.end());
  return clip;
}

}  // namespace detail

// Static task: one fixed pattern per class, samples differ only by noise.
inline Dataset gen_static(const SynthSpec& spec) {
  spec.validate();
  Rng rng(fold_seed(spec.seed, 0x5feau));
  Dataset ds;
  ds.n_classes = spec.n_classes;
  for (int c = 0; c < spec.n_classes; ++c) {
    const auto frame = render_frame(spec.image_h, spec.image_w, spec.channels,
                                    class_orientation(c, spec.n_classes),
                                    class_blob_angle(c, spec.n_classes));
    for (int s = 0; s < spec.samples_per_class; ++s) {
      Clip<float> clip = detail::clip_from_frames({frame}, spec.image_h, spec.image_w, spec.channels);
      add_noise(clip, spec.noise, rng);
      ds.clips.push_back(std::move(clip));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// Dynamic task. With temporal coding on, classes (2p, 2p+1) share each
// sample's frame set exactly and differ only by playback direction; the blob
// phase is drawn per sample, so single-frame marginals of a pair coincide.
// With coding off, every class has its own gradient orientation and a forward
// rotating blob, so single frames already identify the class.
inline Dataset gen_dynamic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(fold_seed(spec.seed, 0xd1fau));
  Dataset ds;
  ds.n_classes = spec.n_classes;
  const double step = 2.0 * std::numbers::pi / spec.clip_t;

  auto frames_from_phase = [&](double theta, double phase) {
    std::vector<std::vector<float>> frames;
    frames.reserve((size_t)spec.clip_t);
    for (int k = 0; k < spec.clip_t; ++k)
      frames.push_back(render_frame(spec.image_h, spec.image_w, spec.channels, theta,
                                    phase + k * step));
    return frames;
  };

  if (spec.temporal_coding) {
    for (int p = 0; p < spec.n_classes / 2; ++p) {
      const double theta = class_orientation(2 * p, spec.n_classes);
      for (int s = 0; s < spec.samples_per_class; ++s) {
        const double phase = rng.uniform() * 2.0 * std::numbers::pi;
        auto frames = frames_from_phase(theta, phase);
        auto fwd = detail::clip_from_frames(frames, spec.image_h, spec.image_w, spec.channels);
        std::reverse(frames.begin(), frames.end());
        auto rev = detail::clip_from_frames(frames, spec.image_h, spec.image_w, spec.channels);
        add_noise(fwd, spec.noise, rng);
        add_noise(rev, spec.noise, rng);
        ds.clips.push_back(std::move(fwd));
        ds.labels.push_back(2 * p);
        ds.clips.push_back(std::move(rev));
        ds.labels.push_back(2 * p + 1);
      }
    }
  } else {
    for (int c = 0; c < spec.n_classes; ++c) {
      const double theta = std::numbers::pi * (double)c / spec.n_classes;
      for (int s = 0; s < spec.samples_per_class; ++s) {
        const double phase = rng.uniform() * 2.0 * std::numbers::pi;
        auto clip = detail::clip_from_frames(frames_from_phase(theta, phase), spec.image_h,
                                             spec.image_w, spec.channels);
        add_noise(clip, spec.noise, rng);
        ds.clips.push_back(std::move(clip));
        ds.labels.push_back(c);
      }
    }
  }
  return ds;
}

// Conflicting task pair: every sample carries an orientation attribute o and
// a blob attribute b, drawn over the full o x b grid. The static task labels
// the sample o, the dynamic task labels the very same pixels b, so a shared
// representation is pulled in two directions at once. samples_per_class
// counts instances per (o, b) cell.
inline std::pair<Dataset, Dataset> gen_conflict_pair(const SynthSpec& spec, int clip_t = 2) {
  spec.validate();
  if (clip_t < 1) throw std::invalid_argument("synth: conflict clip length must be positive");
  Rng rng(fold_seed(spec.seed, 0xc0f1u));
  const int n = spec.n_classes;
  Dataset sfer, dfer;
  sfer.n_classes = n;
  dfer.n_classes = n;
  for (int o = 0; o < n; ++o)
    for (int b = 0; b < n; ++b) {
      const double theta = std::numbers::pi * (double)o / n;
      const double phi = 2.0 * std::numbers::pi * (double)b / n;
      for (int s = 0; s < spec.samples_per_class; ++s) {
        auto frame = render_frame(spec.image_h, spec.image_w, spec.channels, theta, phi);
        Clip<float> img =
            detail::clip_from_frames({frame}, spec.image_h, spec.image_w, spec.channels);
        add_noise(img, spec.noise, rng);
        Clip<float> clip;
        clip.t = clip_t;
        clip.h = img.h;
        clip.w = img.w;
        clip.c = img.c;
        clip.data.reserve((size_t)clip.size());
        for (int k = 0; k < clip_t; ++k)
          clip.data.insert(clip.data.end(), img.data.begin(), img.data.end());
        sfer.clips.push_back(std::move(img));
        sfer.labels.push_back(o);
        dfer.clips.push_back(std::move(clip));
        dfer.labels.push_back(b);
      }
    }
  return {std::move(sfer), std::move(dfer)};
}

// Mirror along the width axis.
inline Clip<float> hflip_clip(const Clip<float>& in) {
  Clip<float> out = in;
  for (int t = 0; t < in.t; ++t)
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < in.w; ++x)
        for (int c = 0; c < in.c; ++c)
          out.at(t, y, x, c) = in.at(t, y, in.w - 1 - x, c);
  return out;
}

// Flat feature helpers for pixel-space probes.
inline std::vector<float> middle_frame(const Clip<float>& clip) {
  const int k = clip.t / 2;
  const int64_t frame = (int64_t)clip.h * clip.w * clip.c;
  return std::vector<float>(clip.data.begin() + k * frame, clip.data.begin() + (k + 1) * frame);
}

// Nearest class centroid in squared L2; ties go to the lower class index.
inline std::vector<int> centroid_predict(const std::vector<std::vector<float>>& train_x,
                                         const std::vector<int>& train_y, int n_classes,
                                         const std::vector<std::vector<float>>& eval_x) {
  if (train_x.empty() || train_x.size() != train_y.size())
    throw std::invalid_argument("centroid_predict: bad training set");
  const size_t dim = train_x[0].size();
  std::vector<std::vector<double>> centroid((size_t)n_classes, std::vector<double>(dim, 0.0));
  std::vector<int> count((size_t)n_classes, 0);
  for (size_t i = 0; i < train_x.size(); ++i) {
    if (train_x[i].size() != dim) throw std::invalid_argument("centroid_predict: ragged features");
    if (train_y[i] < 0 || train_y[i] >= n_classes)
      throw std::invalid_argument("centroid_predict: label out of range");
    for (size_t j = 0; j < dim; ++j) centroid[(size_t)train_y[i]][j] += train_x[i][j];
    ++count[(size_t)train_y[i]];
  }
  for (int c = 0; c < n_classes; ++c) {
    if (count[(size_t)c] == 0) continue;
    for (auto& v : centroid[(size_t)c]) v /= count[(size_t)c];
  }
  std::vector<int> pred;
  pred.reserve(eval_x.size());
  for (const auto& x : eval_x) {
    if (x.size() != dim) throw std::invalid_argument("centroid_predict: ragged features");
    int best = -1;
    double best_d = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      if (count[(size_t)c] == 0) continue;
      double d = 0.0;
      for (size_t j = 0; j < dim; ++j) {
        const double diff = (double)x[j] - centroid[(size_t)c][j];
        d += diff * diff;
      }
      if (best < 0 || d < best_d) {
        best = c;
        best_d = d;
      }
    }
    pred.push_back(best);
  }
  return pred;
}

// Binary tensor file: magic "NTSR", rank u8, dims u32 LE, f32 LE payload,
// row-major. Files land via write-temp-then-rename.
inline void write_tensor_file(const std::filesystem::path& path, const std::vector<uint32_t>& dims,
                              const float* data) {
  static_assert(std::endian::native == std::endian::little, "writer assumes little-endian");
  if (dims.empty() || dims.size() > 255) throw std::invalid_argument("ntsr: rank must be 1..255");
  uint64_t n = 1;
  for (uint32_t d : dims) n *= d;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("ntsr: cannot open " + tmp);
    f.write("NTSR", 4);
    const uint8_t rank = (uint8_t)dims.size();
    f.write((const char*)&rank, 1);
    f.write((const char*)dims.data(), (std::streamsize)(dims.size() * sizeof(uint32_t)));
    f.write((const char*)data, (std::streamsize)(n * sizeof(float)));
    if (!f) throw std::runtime_error("ntsr: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::pair<std::vector<uint32_t>, std::vector<float>> read_tensor_file(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ntsr: cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "NTSR", 4) != 0)
    throw std::runtime_error("ntsr: bad magic in " + path.string());
  uint8_t rank = 0;
  f.read((char*)&rank, 1);
  if (!f || rank == 0) throw std::runtime_error("ntsr: bad rank in " + path.string());
  std::vector<uint32_t> dims(rank);
  f.read((char*)dims.data(), (std::streamsize)(rank * sizeof(uint32_t)));
  uint64_t n = 1;
  for (uint32_t d : dims) {
    if (d == 0 || n > (1ull << 32)) throw std::runtime_error("ntsr: bad dims in " + path.string());
    n *= d;
  }
  std::vector<float> data(n);
  f.read((char*)data.data(), (std::streamsize)(n * sizeof(float)));
  if (!f) throw std::runtime_error("ntsr: truncated payload in " + path.string());
  return {std::move(dims), std::move(data)};
}

struct ChannelStats {
  std::vector<double> mean, stdev;
};

// Per-channel moments with a variance floor so constant channels stay finite.
inline ChannelStats compute_channel_stats(const std::vector<const Dataset*>& sets, int channels) {
  ChannelStats st;
  st.mean.assign((size_t)channels, 0.0);
  st.stdev.assign((size_t)channels, 1.0);
  std::vector<double> sum((size_t)channels, 0.0), sum2((size_t)channels, 0.0);
  std::vector<int64_t> n((size_t)channels, 0);
  for (const Dataset* ds : sets)
    for (const auto& clip : ds->clips) {
      if (clip.c != channels) throw std::invalid_argument("stats: channel count mismatch");
      for (int64_t i = 0; i < clip.size(); ++i) {
        const int c = (int)(i % channels);
        const double v = clip.data[(size_t)i];
        sum[(size_t)c] += v;
        sum2[(size_t)c] += v * v;
        ++n[(size_t)c];
      }
    }
  for (int c = 0; c < channels; ++c) {
    if (n[(size_t)c] == 0) continue;
    st.mean[(size_t)c] = sum[(size_t)c] / n[(size_t)c];
    const double var = sum2[(size_t)c] / n[(size_t)c] - st.mean[(size_t)c] * st.mean[(size_t)c];
    st.stdev[(size_t)c] = std::sqrt(std::max(var, 1e-12));
  }
  return st;
}

inline void standardize_clip(Clip<float>& clip, const ChannelStats& st) {
  if ((int)st.mean.size() != clip.c) throw std::invalid_argument("standardize: channel mismatch");
  for (int64_t i = 0; i < clip.size(); ++i) {
    const int c = (int)(i % clip.c);
    clip.data[(size_t)i] =
        (float)(((double)clip.data[(size_t)i] - st.mean[(size_t)c]) / st.stdev[(size_t)c]);
  }
}

struct DatasetEntry {
  std::string task;   // e.g. "sfer" / "dfer"
  std::string split;  // e.g. "train" / "val" / "test"
  const Dataset* data = nullptr;
};

// Writes every clip as its own tensor file plus manifest.csv. The manifest
// carries data rows (path,label,task,split) and per-channel standardization
// statistics, computed over the train splits, as leading comment lines.
inline void save_datasets(const std::filesystem::path& dir, const std::vector<DatasetEntry>& sets) {
  namespace fs = std::filesystem;
  if (sets.empty()) throw std::invalid_argument("save_datasets: nothing to write");
  fs::create_directories(dir);

  std::vector<const Dataset*> train_sets;
  for (const auto& e : sets)
    if (e.split == "train") train_sets.push_back(e.data);
  if (train_sets.empty())
    for (const auto& e : sets) train_sets.push_back(e.data);
  const int channels = train_sets[0]->clips.empty() ? 1 : train_sets[0]->clips[0].c;
  const auto st = compute_channel_stats(train_sets, channels);

  std::ostringstream manifest;
  manifest.precision(17);
  manifest << "# channel_mean ";
  for (size_t c = 0; c < st.mean.size(); ++c) manifest << (c ? "," : "") << st.mean[c];
  manifest << "\n# channel_std ";
  for (size_t c = 0; c < st.stdev.size(); ++c) manifest << (c ? "," : "") << st.stdev[c];
  manifest << "\npath,label,task,split\n";

  for (const auto& e : sets) {
    if (!e.data) throw std::invalid_argument("save_datasets: null dataset");
    if (e.data->clips.size() != e.data->labels.size())
      throw std::invalid_argument("save_datasets: clip/label count mismatch");
    for (size_t i = 0; i < e.data->clips.size(); ++i) {
      const auto& clip = e.data->clips[i];
      char name[96];
      std::snprintf(name, sizeof(name), "%s_%s_%05zu.ntsr", e.task.c_str(), e.split.c_str(), i);
      write_tensor_file(dir / name,
                        {(uint32_t)clip.t, (uint32_t)clip.h, (uint32_t)clip.w, (uint32_t)clip.c},
                        clip.data.data());
      manifest << name << ',' << e.data->labels[i] << ',' << e.task << ',' << e.split << '\n';
    }
  }

  const auto tmp = dir / "manifest.csv.tmp";
  {
    std::ofstream f(tmp, std::ios::trunc | std::ios::binary);
    if (!f) throw std::runtime_error("save_datasets: cannot open manifest");
    const auto s = manifest.str();
    f.write(s.data(), (std::streamsize)s.size());
  }
  fs::rename(tmp, dir / "manifest.csv");
}

inline ChannelStats load_channel_stats(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.csv");
  if (!f) throw std::runtime_error("load: no manifest in " + dir.string());
  ChannelStats st;
  std::string line;
  auto parse_list = [](const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
  };
  while (std::getline(f, line) && !line.empty() && line[0] == '#') {
    if (line.rfind("# channel_mean ", 0) == 0) st.mean = parse_list(line.substr(15));
    if (line.rfind("# channel_std ", 0) == 0) st.stdev = parse_list(line.substr(14));
  }
  if (st.mean.empty() || st.mean.size() != st.stdev.size())
    throw std::runtime_error("load: manifest lacks channel statistics");
  return st;
}

// Loads one (task, split) selection in manifest order. Standardization uses
// the manifest's stored statistics so train and eval see one fixed transform.
inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& task,
                            const std::string& split, bool standardize = true) {
  std::ifstream f(dir / "manifest.csv");
  if (!f) throw std::runtime_error("load: no manifest in " + dir.string());
  const ChannelStats st = standardize ? load_channel_stats(dir) : ChannelStats{};

  Dataset ds;
  std::string line;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "path,label,task,split") throw std::runtime_error("load: bad manifest header");
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string path, label_s, task_s, split_s;
    if (!std::getline(ss, path, ',') || !std::getline(ss, label_s, ',') ||
        !std::getline(ss, task_s, ',') || !std::getline(ss, split_s))
      throw std::runtime_error("load: bad manifest row: " + line);
    if (task_s != task || split_s != split) continue;
    auto [dims, data] = read_tensor_file(dir / path);
    if (dims.size() != 4) throw std::runtime_error("load: expected rank-4 clip in " + path);
    Clip<float> clip;
    clip.t = (int)dims[0];
    clip.h = (int)dims[1];
    clip.w = (int)dims[2];
    clip.c = (int)dims[3];
    clip.data = std::move(data);
    if (standardize) standardize_clip(clip, st);
    ds.clips.push_back(std::move(clip));
    ds.labels.push_back(std::stoi(label_s));
  }
  if (!header_seen) throw std::runtime_error("load: manifest has no data header");
  for (int l : ds.labels) ds.n_classes = std::max(ds.n_classes, l + 1);
  return ds;
}

}  // namespace s4d
