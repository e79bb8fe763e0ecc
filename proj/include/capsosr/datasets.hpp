#ifndef CAPSOSR_DATASETS_HPP_
#define CAPSOSR_DATASETS_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "capsosr/random.hpp"
#include "capsosr/tensor.hpp"

namespace capsosr {

struct ImageDataset {
  Tensor images;  // [N, C, H, W], values in [0, 1]
  std::vector<int64_t> labels;

  int64_t size() const { return images.numel() == 0 ? 0 : images.dim(0); }
};

// Dataset root: $CAPSOSR_DATA_DIR when set, else ./data
inline std::string data_root() {
  const char* env = std::getenv("CAPSOSR_DATA_DIR");
  if (env && *env) return std::string(env);
  return "./data";
}

// ---------------------------------------------------------------------------
// IDX format (the raw MNIST container). Supported element types: 0x08 ubyte,
// 0x0D float, 0x0E double.
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t read_be32(std::istream& s) {
  unsigned char b[4];
  s.read(reinterpret_cast<char*>(b), 4);
  if (!s) throw std::runtime_error("idx: truncated header");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

inline void write_be32(std::ostream& s, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  s.write(reinterpret_cast<char*>(b), 4);
}

inline double read_be_double(std::istream& s) {
  unsigned char b[8];
  s.read(reinterpret_cast<char*>(b), 8);
  if (!s) throw std::runtime_error("idx: truncated data");
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u = (u << 8) | b[i];
  double d;
  static_assert(sizeof(d) == sizeof(u));
  std::memcpy(&d, &u, 8);
  return d;
}

inline void write_be_double(std::ostream& s, double d) {
  uint64_t u;
  std::memcpy(&u, &d, 8);
  unsigned char b[8];
  for (int i = 7; i >= 0; --i) {
    b[i] = static_cast<unsigned char>(u & 0xff);
    u >>= 8;
  }
  s.write(reinterpret_cast<char*>(b), 8);
}

}  // namespace detail

// Reads an IDX tensor file; ubyte data is scaled to [0,1].
inline Tensor read_idx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_idx: cannot open " + path);
  uint32_t magic = detail::read_be32(f);
  if ((magic & 0xffff0000u) != 0) throw std::runtime_error("read_idx: bad magic in " + path);
  uint32_t dtype = (magic >> 8) & 0xff;
  uint32_t ndim = magic & 0xff;
  std::vector<int64_t> shape;
  int64_t numel = 1;
  for (uint32_t i = 0; i < ndim; ++i) {
    int64_t d = static_cast<int64_t>(detail::read_be32(f));
    shape.push_back(d);
    numel *= d;
  }
  Tensor out(shape);
  if (dtype == 0x08) {
    std::vector<unsigned char> buf(static_cast<size_t>(numel));
    f.read(reinterpret_cast<char*>(buf.data()), numel);
    if (!f) throw std::runtime_error("read_idx: truncated data in " + path);
    for (int64_t i = 0; i < numel; ++i) out[i] = static_cast<double>(buf[static_cast<size_t>(i)]) / 255.0;
  } else if (dtype == 0x0E) {
    for (int64_t i = 0; i < numel; ++i) out[i] = detail::read_be_double(f);
  } else if (dtype == 0x0D) {
    for (int64_t i = 0; i < numel; ++i) {
      uint32_t u = detail::read_be32(f);
      float fl;
      std::memcpy(&fl, &u, 4);
      out[i] = static_cast<double>(fl);
    }
  } else {
    throw std::runtime_error("read_idx: unsupported element type in " + path);
  }
  return out;
}

// Writes a tensor as an IDX file with double elements (type 0x0E).
inline void write_idx_double(const Tensor& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_idx_double: cannot open " + path);
  uint32_t magic = (0x0Eu << 8) | static_cast<uint32_t>(t.ndim());
  detail::write_be32(f, magic);
  for (size_t i = 0; i < t.ndim(); ++i) detail::write_be32(f, static_cast<uint32_t>(t.dim(i)));
  for (int64_t i = 0; i < t.numel(); ++i) detail::write_be_double(f, t[i]);
}

// Reads an IDX label file into integer labels (values are *not* rescaled).
inline std::vector<int64_t> read_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_idx_labels: cannot open " + path);
  uint32_t magic = detail::read_be32(f);
  uint32_t dtype = (magic >> 8) & 0xff;
  uint32_t ndim = magic & 0xff;
  if (dtype != 0x08 || ndim != 1) throw std::runtime_error("read_idx_labels: expected 1-D ubyte in " + path);
  int64_t n = static_cast<int64_t>(detail::read_be32(f));
  std::vector<unsigned char> buf(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw std::runtime_error("read_idx_labels: truncated data in " + path);
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = buf[static_cast<size_t>(i)];
  return out;
}

// MNIST-format directory: {train,t10k}-{images-idx3,labels-idx1}-ubyte
inline ImageDataset load_mnist_idx(const std::string& dir, bool train) {
  std::string prefix = train ? "train" : "t10k";
  std::string img_path = dir + "/" + prefix + "-images-idx3-ubyte";
  std::string lbl_path = dir + "/" + prefix + "-labels-idx1-ubyte";
  if (!std::filesystem::exists(img_path)) {
    throw std::runtime_error("load_mnist_idx: missing file " + img_path);
  }
  if (!std::filesystem::exists(lbl_path)) {
    throw std::runtime_error("load_mnist_idx: missing file " + lbl_path);
  }
  Tensor imgs = read_idx(img_path);
  if (imgs.ndim() != 3) throw std::runtime_error("load_mnist_idx: expected [N,H,W] images");
  ImageDataset ds;
  ds.images = imgs.reshaped({imgs.dim(0), 1, imgs.dim(1), imgs.dim(2)});
  ds.labels = read_idx_labels(lbl_path);
  if (static_cast<int64_t>(ds.labels.size()) != ds.images.dim(0)) {
    throw std::runtime_error("load_mnist_idx: image/label count mismatch");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Generic image-folder adapter: one subdirectory per class (sorted name
// order gives the class ids), images as binary or ASCII PGM/PPM.
// ---------------------------------------------------------------------------

namespace detail {

inline void skip_pnm_junk(std::istream& s) {
  for (;;) {
    int c = s.peek();
    if (c == '#') {
      std::string line;
      std::getline(s, line);
    } else if (std::isspace(c)) {
      s.get();
    } else {
      return;
    }
  }
}

}  // namespace detail

// Loads a single PGM (P2/P5) or PPM (P3/P6) image as [C,H,W] in [0,1].
inline Tensor read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pnm: cannot open " + path);
  std::string tag;
  f >> tag;
  bool ascii = (tag == "P2" || tag == "P3");
  bool color = (tag == "P3" || tag == "P6");
  if (tag != "P2" && tag != "P3" && tag != "P5" && tag != "P6") {
    throw std::runtime_error("read_pnm: unsupported format " + tag + " in " + path);
  }
  detail::skip_pnm_junk(f);
  int64_t w, h, maxval;
  f >> w;
  detail::skip_pnm_junk(f);
  f >> h;
  detail::skip_pnm_junk(f);
  f >> maxval;
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("read_pnm: unsupported maxval in " + path);
  int64_t c = color ? 3 : 1;
  Tensor out({c, h, w});
  if (ascii) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t ch = 0; ch < c; ++ch) {
          int64_t v;
          f >> v;
          out[(ch * h + y) * w + x] = static_cast<double>(v) / static_cast<double>(maxval);
        }
  } else {
    f.get();  // the single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<size_t>(w * h * c));
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("read_pnm: truncated pixel data in " + path);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t ch = 0; ch < c; ++ch)
          out[(ch * h + y) * w + x] =
              static_cast<double>(buf[static_cast<size_t>((y * w + x) * c + ch)]) / static_cast<double>(maxval);
  }
  return out;
}

inline ImageDataset load_image_folder(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("load_image_folder: not a directory: " + dir);
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw std::runtime_error("load_image_folder: no class directories in " + dir);
  std::vector<Tensor> images;
  std::vector<int64_t> labels;
  for (size_t ci = 0; ci < class_dirs.size(); ++ci) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / class_dirs[ci])) {
      if (e.is_regular_file()) files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const std::string& f : files) {
      images.push_back(read_pnm(f));
      labels.push_back(static_cast<int64_t>(ci));
    }
  }
  if (images.empty()) throw std::runtime_error("load_image_folder: no images in " + dir);
  const auto& s0 = images.front().shape();
  Tensor stacked({static_cast<int64_t>(images.size()), s0[0], s0[1], s0[2]});
  int64_t per = images.front().numel();
  for (size_t i = 0; i < images.size(); ++i) {
    if (!(images[i].shape() == s0)) throw std::runtime_error("load_image_folder: mixed image shapes");
    for (int64_t j = 0; j < per; ++j) stacked[static_cast<int64_t>(i) * per + j] = images[i][j];
  }
  return ImageDataset{std::move(stacked), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Synthetic class-blob dataset for desk-scale experiments: class k is a
// bright block at a class-specific grid position plus pixel noise.
// ---------------------------------------------------------------------------

inline ImageDataset synth_blob_dataset(int64_t n_per_class, int64_t n_classes, int64_t hw,
                                       uint64_t seed) {
  if (n_per_class < 1 || n_classes < 2 || hw < 4) {
    throw std::invalid_argument("synth_blob_dataset: bad arguments");
  }
  Rng rng(mix_seed(seed, 21));
  int64_t n = n_per_class * n_classes;
  ImageDataset ds;
  ds.images = Tensor({n, 1, hw, hw});
  ds.labels.resize(static_cast<size_t>(n));
  int64_t grid = 2;  // blob anchor grid
  int64_t cell = hw / (grid + 1);
  int64_t idx = 0;
  for (int64_t c = 0; c < n_classes; ++c) {
    // per-class anchor, wrapping over the grid with a diagonal offset
    int64_t gy = (c / grid) % grid, gx = c % grid;
    int64_t cy = cell / 2 + (gy + 1) * cell + (c / (grid * grid)) % cell;
    int64_t cx = cell / 2 + (gx + 1) * cell + (c / (grid * grid)) % cell;
    for (int64_t s = 0; s < n_per_class; ++s, ++idx) {
      ds.labels[static_cast<size_t>(idx)] = c;
      double* img = ds.images.data() + idx * hw * hw;
      for (int64_t i = 0; i < hw * hw; ++i) img[i] = 0.05 * rng.uniform();
      int64_t jitter_y = rng.index(3) - 1, jitter_x = rng.index(3) - 1;
      int64_t by = std::clamp<int64_t>(cy + jitter_y, 1, hw - 2);
      int64_t bx = std::clamp<int64_t>(cx + jitter_x, 1, hw - 2);
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx) {
          img[(by + dy) * hw + (bx + dx)] = 0.7 + 0.3 * rng.uniform();
        }
    }
  }
  return ds;
}

// Keeps only the samples whose label is in `classes`, remapping labels to
// 0..K-1 by the order given.
inline ImageDataset filter_remap(const ImageDataset& ds, const std::vector<int64_t>& classes) {
  std::map<int64_t, int64_t> remap;
  for (size_t i = 0; i < classes.size(); ++i) remap[classes[i]] = static_cast<int64_t>(i);
  std::vector<int64_t> keep;
  for (int64_t i = 0; i < ds.size(); ++i) {
    if (remap.count(ds.labels[static_cast<size_t>(i)])) keep.push_back(i);
  }
  int64_t per = ds.images.numel() / std::max<int64_t>(ds.size(), 1);
  ImageDataset out;
  out.images = Tensor({static_cast<int64_t>(keep.size()), ds.images.dim(1), ds.images.dim(2),
                       ds.images.dim(3)});
  out.labels.resize(keep.size());
  for (size_t i = 0; i < keep.size(); ++i) {
    for (int64_t j = 0; j < per; ++j) out.images[static_cast<int64_t>(i) * per + j] = ds.images[keep[i] * per + j];
    out.labels[i] = remap[ds.labels[static_cast<size_t>(keep[i])]];
  }
  return out;
}

}  // namespace capsosr

#endif  // CAPSOSR_DATASETS_HPP_
