#include "spfl/net.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace spfl {

namespace {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;

int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col layout per sample: (c*k*k) rows by (oh*ow) cols, row-major.
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad,
            int oh, int ow, T* col) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<size_t>(ch) * k * k + ky * k + kx) *
                           static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            dst += ow;
            continue;
          }
          const T* row = x + (static_cast<size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            *dst++ = (ix < 0 || ix >= w) ? T(0) : row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int k, int stride, int pad,
                int oh, int ow, T* dx) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<size_t>(ch) * k * k + ky * k + kx) *
                                 static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            src += ow;
            continue;
          }
          T* row = dx + (static_cast<size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) row[ix] += *src;
            ++src;
          }
        }
      }
    }
  }
}

// out_b(oc, ohow) = W(oc, ckk) * col_b + bias
template <typename T>
void conv_apply(const T* weight, const T* bias, const T* col, int oc, int ckk,
                int ohow, T* out) {
  CMapM<T> w(weight, oc, ckk);
  CMapM<T> c(col, ckk, ohow);
  MapM<T> o(out, oc, ohow);
  o.noalias() = w * c;
  if (bias != nullptr) {
    for (int i = 0; i < oc; ++i) o.row(i).array() += bias[i];
  }
}

template <typename T>
void conv_backward_sample(const T* weight, const T* col, const T* dout, int oc,
                          int ckk, int ohow, T* dweight, T* dbias, T* dcol) {
  CMapM<T> w(weight, oc, ckk);
  CMapM<T> c(col, ckk, ohow);
  CMapM<T> do_(dout, oc, ohow);
  if (dweight != nullptr) {
    MapM<T> dw(dweight, oc, ckk);
    dw.noalias() += do_ * c.transpose();
    for (int i = 0; i < oc; ++i) dbias[i] += do_.row(i).sum();
  }
  if (dcol != nullptr) {
    MapM<T> dc(dcol, ckk, ohow);
    dc.noalias() = w.transpose() * do_;
  }
}

std::string layer_name(int idx, const char* kind) {
  return "layer" + std::to_string(idx) + "." + kind;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest / params

const TensorInfo* Manifest::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template <typename T>
std::vector<Tensor<T>> unflatten(const Params<T>& p) {
  std::vector<Tensor<T>> out;
  out.reserve(p.manifest->tensors.size());
  for (const auto& info : p.manifest->tensors) {
    Tensor<T> t(info.shape);
    std::copy_n(p.values.data() + info.offset, info.extent, t.ptr());
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Params<T> flatten(std::shared_ptr<const Manifest> manifest,
                  const std::vector<Tensor<T>>& tensors) {
  if (tensors.size() != manifest->tensors.size())
    throw ConfigError("flatten: tensor count does not match manifest");
  Params<T> p{manifest, std::vector<T>(manifest->total, T(0))};
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& info = manifest->tensors[i];
    if (tensors[i].size() != info.extent)
      throw ConfigError("flatten: extent mismatch at " + info.name);
    std::copy_n(tensors[i].ptr(), info.extent, p.values.data() + info.offset);
  }
  return p;
}

template std::vector<Tensor<float>> unflatten(const Params<float>&);
template std::vector<Tensor<double>> unflatten(const Params<double>&);
template Params<float> flatten(std::shared_ptr<const Manifest>,
                               const std::vector<Tensor<float>>&);
template Params<double> flatten(std::shared_ptr<const Manifest>,
                                const std::vector<Tensor<double>>&);

// ---------------------------------------------------------------------------
// Spec text form
//
//   input C H W
//   classes K
//   conv OUT K STRIDE PAD | relu | maxpool K STRIDE | dense OUT | gpool |
//   res OUT STRIDE
//   attention I [J ...]

std::string NetworkSpec::to_text() const {
  std::ostringstream os;
  os << "input " << in_channels << ' ' << in_height << ' ' << in_width << '\n';
  os << "classes " << num_classes << '\n';
  for (const auto& l : layers) {
    if (const auto* c = std::get_if<ConvLayer>(&l))
      os << "conv " << c->out_ch << ' ' << c->ksize << ' ' << c->stride << ' '
         << c->pad << '\n';
    else if (std::get_if<ReluLayer>(&l))
      os << "relu\n";
    else if (const auto* m = std::get_if<MaxPoolLayer>(&l))
      os << "maxpool " << m->ksize << ' ' << m->stride << '\n';
    else if (const auto* d = std::get_if<DenseLayer>(&l))
      os << "dense " << d->out_features << '\n';
    else if (std::get_if<GlobalPoolLayer>(&l))
      os << "gpool\n";
    else if (const auto* r = std::get_if<ResidualLayer>(&l))
      os << "res " << r->out_ch << ' ' << r->stride << '\n';
  }
  if (!attention_layers.empty()) {
    os << "attention";
    for (int a : attention_layers) os << ' ' << a;
    os << '\n';
  }
  return os.str();
}

NetworkSpec NetworkSpec::parse(const std::string& text) {
  NetworkSpec spec;
  spec.layers.clear();
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool saw_input = false, saw_classes = false;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    auto want = [&](int n, int* out) {
      for (int i = 0; i < n; ++i)
        if (!(ls >> out[i]))
          throw ConfigError("network spec line " + std::to_string(lineno) +
                            ": '" + tok + "' expects " + std::to_string(n) +
                            " integer arguments");
    };
    int a[4];
    if (tok == "input") {
      want(3, a);
      spec.in_channels = a[0];
      spec.in_height = a[1];
      spec.in_width = a[2];
      saw_input = true;
    } else if (tok == "classes") {
      want(1, a);
      spec.num_classes = a[0];
      saw_classes = true;
    } else if (tok == "conv") {
      want(4, a);
      spec.layers.push_back(ConvLayer{a[0], a[1], a[2], a[3]});
    } else if (tok == "relu") {
      spec.layers.push_back(ReluLayer{});
    } else if (tok == "maxpool") {
      want(2, a);
      spec.layers.push_back(MaxPoolLayer{a[0], a[1]});
    } else if (tok == "dense") {
      want(1, a);
      spec.layers.push_back(DenseLayer{a[0]});
    } else if (tok == "gpool") {
      spec.layers.push_back(GlobalPoolLayer{});
    } else if (tok == "res") {
      want(2, a);
      spec.layers.push_back(ResidualLayer{a[0], a[1]});
    } else if (tok == "attention") {
      int v;
      while (ls >> v) spec.attention_layers.push_back(v);
    } else {
      throw ConfigError("network spec line " + std::to_string(lineno) +
                        ": unknown directive '" + tok + "'");
    }
  }
  if (!saw_input || !saw_classes)
    throw ConfigError("network spec: missing 'input' or 'classes' line");
  return spec;
}

NetworkSpec NetworkSpec::mnist_cnn() {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_height = 28;
  s.in_width = 28;
  s.num_classes = 10;
  s.layers = {ConvLayer{16, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{2, 2},
              ConvLayer{32, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{2, 2},
              DenseLayer{128},        ReluLayer{}, DenseLayer{10}};
  s.attention_layers = {5};
  return s;
}

NetworkSpec NetworkSpec::cifar_resnet() {
  NetworkSpec s;
  s.in_channels = 3;
  s.in_height = 32;
  s.in_width = 32;
  s.num_classes = 10;
  s.layers = {ConvLayer{16, 3, 1, 1}, ReluLayer{},          ResidualLayer{16, 1},
              ResidualLayer{16, 1},   ResidualLayer{32, 2}, ResidualLayer{32, 1},
              ResidualLayer{64, 2},   ResidualLayer{64, 1}, GlobalPoolLayer{},
              DenseLayer{10}};
  s.attention_layers = {7};
  return s;
}

// ---------------------------------------------------------------------------
// Engine

template <typename T>
Engine<T>::Engine(NetworkSpec spec) : spec_(std::move(spec)) {
  validate_and_build();
}

template <typename T>
void Engine<T>::validate_and_build() {
  auto manifest = std::make_shared<Manifest>();
  extents_.clear();
  first_tensor_.clear();
  Extent cur{true, spec_.in_channels, spec_.in_height, spec_.in_width, 0};
  if (cur.c < 1 || cur.h < 1 || cur.w < 1)
    throw ConfigError("network spec: bad input shape");
  extents_.push_back(cur);

  auto add_tensor = [&](const std::string& name, std::vector<int> shape) {
    TensorInfo info;
    info.name = name;
    info.shape = std::move(shape);
    info.extent = Tensor<T>::count(info.shape);
    info.offset = manifest->total;
    manifest->total += info.extent;
    manifest->tensors.push_back(std::move(info));
  };

  for (int i = 0; i < static_cast<int>(spec_.layers.size()); ++i) {
    const auto& l = spec_.layers[static_cast<size_t>(i)];
    first_tensor_.push_back(manifest->tensors.size());
    auto bad = [&](const std::string& what) {
      return ConfigError("layer " + std::to_string(i) + ": " + what);
    };
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      if (!cur.spatial) throw bad("conv requires a spatial input");
      int oh = conv_out(cur.h, c->ksize, c->stride, c->pad);
      int ow = conv_out(cur.w, c->ksize, c->stride, c->pad);
      if (c->out_ch < 1 || oh < 1 || ow < 1) throw bad("conv output is empty");
      add_tensor(layer_name(i, "conv.weight"),
                 {c->out_ch, cur.c, c->ksize, c->ksize});
      add_tensor(layer_name(i, "conv.bias"), {c->out_ch});
      cur = Extent{true, c->out_ch, oh, ow, 0};
    } else if (std::get_if<ReluLayer>(&l)) {
      // shape unchanged
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      if (!cur.spatial) throw bad("maxpool requires a spatial input");
      int oh = (cur.h - m->ksize) / m->stride + 1;
      int ow = (cur.w - m->ksize) / m->stride + 1;
      if (oh < 1 || ow < 1) throw bad("maxpool output is empty");
      cur = Extent{true, cur.c, oh, ow, 0};
    } else if (const auto* d = std::get_if<DenseLayer>(&l)) {
      int in_features = static_cast<int>(cur.count());
      if (d->out_features < 1) throw bad("dense output is empty");
      add_tensor(layer_name(i, "dense.weight"), {d->out_features, in_features});
      add_tensor(layer_name(i, "dense.bias"), {d->out_features});
      cur = Extent{false, 0, 0, 0, d->out_features};
    } else if (std::get_if<GlobalPoolLayer>(&l)) {
      if (!cur.spatial) throw bad("gpool requires a spatial input");
      cur = Extent{false, 0, 0, 0, cur.c};
    } else if (const auto* r = std::get_if<ResidualLayer>(&l)) {
      if (!cur.spatial) throw bad("res requires a spatial input");
      int oh = conv_out(cur.h, 3, r->stride, 1);
      int ow = conv_out(cur.w, 3, r->stride, 1);
      if (r->out_ch < 1 || oh < 1 || ow < 1) throw bad("res output is empty");
      add_tensor(layer_name(i, "res.conv1.weight"), {r->out_ch, cur.c, 3, 3});
      add_tensor(layer_name(i, "res.conv1.bias"), {r->out_ch});
      add_tensor(layer_name(i, "res.conv2.weight"),
                 {r->out_ch, r->out_ch, 3, 3});
      add_tensor(layer_name(i, "res.conv2.bias"), {r->out_ch});
      if (r->stride != 1 || r->out_ch != cur.c) {
        add_tensor(layer_name(i, "res.proj.weight"), {r->out_ch, cur.c, 1, 1});
        add_tensor(layer_name(i, "res.proj.bias"), {r->out_ch});
      }
      cur = Extent{true, r->out_ch, oh, ow, 0};
    }
    extents_.push_back(cur);
  }
  if (cur.spatial || cur.d != spec_.num_classes)
    throw ConfigError("network spec: final layer must produce " +
                      std::to_string(spec_.num_classes) + " logits");
  for (int a : spec_.attention_layers) {
    if (a < 0 || a >= static_cast<int>(spec_.layers.size()))
      throw ConfigError("attention layer " + std::to_string(a) +
                        " out of range");
    if (!extents_[static_cast<size_t>(a) + 1].spatial)
      throw ConfigError("attention layer " + std::to_string(a) +
                        " has no spatial activation map");
  }
  manifest_ = std::move(manifest);
}

template <typename T>
std::vector<int> Engine<T>::attention_layers() const {
  if (!spec_.attention_layers.empty()) return spec_.attention_layers;
  int last = -1;
  for (int i = 0; i < num_layers(); ++i)
    if (layer_is_spatial(i)) last = i;
  if (last < 0) return {};
  return {last};
}

template <typename T>
Params<T> Engine<T>::zero_params() const {
  return Params<T>{manifest_, std::vector<T>(manifest_->total, T(0))};
}

template <typename T>
size_t Engine<T>::param_offset_above(int layer) const {
  if (layer + 1 >= num_layers()) return manifest_->total;
  size_t idx = first_tensor_[static_cast<size_t>(layer) + 1];
  if (idx >= manifest_->tensors.size()) return manifest_->total;
  return manifest_->tensors[idx].offset;
}

template <typename T>
Params<T> Engine<T>::init_params(Rng& rng) const {
  Params<T> p = zero_params();
  for (const auto& info : manifest_->tensors) {
    bool is_weight = info.shape.size() > 1;
    if (!is_weight) continue;  // biases stay zero
    size_t fan_in = 1;
    for (size_t i = 1; i < info.shape.size(); ++i)
      fan_in *= static_cast<size_t>(info.shape[i]);
    T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    T* v = p.values.data() + info.offset;
    for (size_t i = 0; i < info.extent; ++i)
      v[i] = static_cast<T>(rng.normal()) * stddev;
  }
  return p;
}

template <typename T>
Mat<T> Engine<T>::forward(const Params<T>& params, const Tensor<T>& inputs,
                          Cache<T>* cache,
                          const std::map<int, Tensor<T>>* inject_outputs) const {
  if (params.values.size() != manifest_->total)
    throw ConfigError("forward: parameter vector length " +
                      std::to_string(params.values.size()) +
                      " does not match manifest total " +
                      std::to_string(manifest_->total));
  if (inputs.rank() != 4 || inputs.dim(1) != spec_.in_channels ||
      inputs.dim(2) != spec_.in_height || inputs.dim(3) != spec_.in_width)
    throw ConfigError("forward: batch shape does not match network input");
  const int n = inputs.dim(0);

  if (cache != nullptr) {
    cache->retained = true;
    cache->input = inputs;
    cache->layers.assign(static_cast<size_t>(num_layers()), LayerState<T>{});
  }

  Tensor<T> cur = inputs;
  Tensor<T> scratch_col;  // reused when no cache retains it

  for (int i = 0; i < num_layers(); ++i) {
    const auto& l = spec_.layers[static_cast<size_t>(i)];
    const Extent& ein = extents_[static_cast<size_t>(i)];
    const Extent& eout = extents_[static_cast<size_t>(i) + 1];
    LayerState<T>* st = cache ? &cache->layers[static_cast<size_t>(i)] : nullptr;
    const T* pw = nullptr;
    size_t ti = i < static_cast<int>(first_tensor_.size()) ? first_tensor_[static_cast<size_t>(i)] : 0;
    auto tensor_ptr = [&](size_t j) {
      return params.values.data() + manifest_->tensors[ti + j].offset;
    };
    (void)pw;

    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      int ckk = ein.c * c->ksize * c->ksize;
      int ohow = eout.h * eout.w;
      Tensor<T>& col = st ? st->col : scratch_col;
      col.shape = {n, ckk, ohow};
      col.data.resize(static_cast<size_t>(n) * ckk * ohow);
      Tensor<T> out({n, eout.c, eout.h, eout.w});
      for (int b = 0; b < n; ++b) {
        T* colb = col.ptr() + static_cast<size_t>(b) * ckk * ohow;
        im2col(cur.ptr() + static_cast<size_t>(b) * ein.count(), ein.c, ein.h,
               ein.w, c->ksize, c->stride, c->pad, eout.h, eout.w, colb);
        conv_apply(tensor_ptr(0), tensor_ptr(1), colb, eout.c, ckk, ohow,
                   out.ptr() + static_cast<size_t>(b) * eout.count());
      }
      cur = std::move(out);
    } else if (std::get_if<ReluLayer>(&l)) {
      for (auto& v : cur.data) v = v > T(0) ? v : T(0);
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      Tensor<T> out({n, eout.c, eout.h, eout.w});
      std::vector<int32_t> arg(out.size());
      const int hw = ein.h * ein.w;
      for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < ein.c; ++ch) {
          const T* src = cur.ptr() + (static_cast<size_t>(b) * ein.c + ch) * hw;
          size_t obase = (static_cast<size_t>(b) * eout.c + ch) *
                         static_cast<size_t>(eout.h) * eout.w;
          for (int oy = 0; oy < eout.h; ++oy) {
            for (int ox = 0; ox < eout.w; ++ox) {
              int best = oy * m->stride * ein.w + ox * m->stride;
              T bv = src[best];
              for (int ky = 0; ky < m->ksize; ++ky) {
                for (int kx = 0; kx < m->ksize; ++kx) {
                  int idx = (oy * m->stride + ky) * ein.w + ox * m->stride + kx;
                  if (src[idx] > bv) {
                    bv = src[idx];
                    best = idx;
                  }
                }
              }
              out[obase + static_cast<size_t>(oy) * eout.w + ox] = bv;
              arg[obase + static_cast<size_t>(oy) * eout.w + ox] = best;
            }
          }
        }
      }
      if (st) st->argmax = std::move(arg);
      cur = std::move(out);
    } else if (const auto* d = std::get_if<DenseLayer>(&l)) {
      int in_features = static_cast<int>(ein.count());
      Tensor<T> out({n, d->out_features});
      CMapM<T> x(cur.ptr(), n, in_features);
      CMapM<T> w(tensor_ptr(0), d->out_features, in_features);
      MapM<T> o(out.ptr(), n, d->out_features);
      o.noalias() = x * w.transpose();
      const T* bias = tensor_ptr(1);
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < d->out_features; ++j) o(b, j) += bias[j];
      cur = std::move(out);
    } else if (std::get_if<GlobalPoolLayer>(&l)) {
      Tensor<T> out({n, ein.c});
      const int hw = ein.h * ein.w;
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < ein.c; ++ch) {
          const T* src = cur.ptr() + (static_cast<size_t>(b) * ein.c + ch) * hw;
          T acc = T(0);
          for (int j = 0; j < hw; ++j) acc += src[j];
          out[static_cast<size_t>(b) * ein.c + ch] = acc / static_cast<T>(hw);
        }
      cur = std::move(out);
    } else if (const auto* r = std::get_if<ResidualLayer>(&l)) {
      bool proj = r->stride != 1 || r->out_ch != ein.c;
      int ohow = eout.h * eout.w;
      int ckk1 = ein.c * 9;
      int ckk2 = r->out_ch * 9;
      Tensor<T> col1({n, ckk1, ohow}), col2({n, ckk2, ohow});
      Tensor<T> act1({n, r->out_ch, eout.h, eout.w});
      Tensor<T> out({n, r->out_ch, eout.h, eout.w});
      Tensor<T> colp;
      if (proj) colp = Tensor<T>({n, ein.c, ohow});
      for (int b = 0; b < n; ++b) {
        const T* xb = cur.ptr() + static_cast<size_t>(b) * ein.count();
        T* col1b = col1.ptr() + static_cast<size_t>(b) * ckk1 * ohow;
        T* act1b = act1.ptr() + static_cast<size_t>(b) * eout.count();
        T* outb = out.ptr() + static_cast<size_t>(b) * eout.count();
        im2col(xb, ein.c, ein.h, ein.w, 3, r->stride, 1, eout.h, eout.w, col1b);
        conv_apply(tensor_ptr(0), tensor_ptr(1), col1b, r->out_ch, ckk1, ohow,
                   act1b);
        for (size_t j = 0; j < eout.count(); ++j)
          act1b[j] = act1b[j] > T(0) ? act1b[j] : T(0);
        T* col2b = col2.ptr() + static_cast<size_t>(b) * ckk2 * ohow;
        im2col(act1b, r->out_ch, eout.h, eout.w, 3, 1, 1, eout.h, eout.w,
               col2b);
        conv_apply(tensor_ptr(2), tensor_ptr(3), col2b, r->out_ch, ckk2, ohow,
                   outb);
        if (proj) {
          T* colpb = colp.ptr() + static_cast<size_t>(b) * ein.c * ohow;
          im2col(xb, ein.c, ein.h, ein.w, 1, r->stride, 0, eout.h, eout.w,
                 colpb);
          Tensor<T> skip({r->out_ch, eout.h, eout.w});
          conv_apply(tensor_ptr(4), tensor_ptr(5), colpb, r->out_ch, ein.c,
                     ohow, skip.ptr());
          for (size_t j = 0; j < eout.count(); ++j) outb[j] += skip[j];
        } else {
          for (size_t j = 0; j < eout.count(); ++j) outb[j] += xb[j];
        }
        for (size_t j = 0; j < eout.count(); ++j)
          outb[j] = outb[j] > T(0) ? outb[j] : T(0);
      }
      if (st) {
        st->col1 = std::move(col1);
        st->col2 = std::move(col2);
        st->act1 = std::move(act1);
        if (proj) st->colp = std::move(colp);
      }
      cur = std::move(out);
    }
    if (inject_outputs != nullptr) {
      auto it = inject_outputs->find(i);
      if (it != inject_outputs->end()) {
        if (it->second.size() != cur.size())
          throw ConfigError("forward: injected output shape mismatch at layer " +
                            std::to_string(i));
        for (size_t j = 0; j < cur.size(); ++j) cur[j] += it->second[j];
      }
    }
    if (st) st->out = cur;
  }
  return cur;
}

template <typename T>
BackwardResult<T> Engine<T>::backward(const Params<T>& params,
                                      const Cache<T>& cache,
                                      const Mat<T>& dlogits,
                                      const BackwardOptions<T>& opts) const {
  if (!cache.retained || cache.layers.size() != static_cast<size_t>(num_layers()))
    throw StateError("backward: forward cache was not retained");
  const int n = cache.input.dim(0);
  if (dlogits.rank() != 2 || dlogits.dim(0) != n ||
      dlogits.dim(1) != spec_.num_classes)
    throw ConfigError("backward: dlogits shape mismatch");

  BackwardResult<T> result;
  if (opts.param_grads) result.grads = zero_params();

  size_t captures_left =
      opts.capture_layers ? opts.capture_layers->size() : 0;
  auto wants_capture = [&](int i) {
    return opts.capture_layers &&
           std::find(opts.capture_layers->begin(), opts.capture_layers->end(),
                     i) != opts.capture_layers->end();
  };

  Tensor<T> g = dlogits;
  for (int i = num_layers() - 1; i >= 0; --i) {
    if (wants_capture(i)) {
      result.captured[i] = g;
      --captures_left;
    }
    if (opts.extra_output_grads) {
      auto it = opts.extra_output_grads->find(i);
      if (it != opts.extra_output_grads->end()) {
        if (it->second.size() != g.size())
          throw ConfigError("backward: extra gradient shape mismatch at layer " +
                            std::to_string(i));
        for (size_t j = 0; j < g.size(); ++j) g[j] += it->second[j];
      }
    }
    // Without parameter gradients there is nothing below the deepest capture.
    if (!opts.param_grads && captures_left == 0) break;

    const auto& l = spec_.layers[static_cast<size_t>(i)];
    const Extent& ein = extents_[static_cast<size_t>(i)];
    const Extent& eout = extents_[static_cast<size_t>(i) + 1];
    const LayerState<T>& st = cache.layers[static_cast<size_t>(i)];
    const Tensor<T>& below =
        i == 0 ? cache.input : cache.layers[static_cast<size_t>(i) - 1].out;
    size_t ti = first_tensor_[static_cast<size_t>(i)];
    auto tensor_ptr = [&](size_t j) {
      return params.values.data() + manifest_->tensors[ti + j].offset;
    };
    auto grad_ptr = [&](size_t j) -> T* {
      return opts.param_grads
                 ? result.grads.values.data() + manifest_->tensors[ti + j].offset
                 : nullptr;
    };

    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      int ckk = ein.c * c->ksize * c->ksize;
      int ohow = eout.h * eout.w;
      Tensor<T> dx({n, ein.c, ein.h, ein.w});
      Tensor<T> dcol({ckk, ohow});
      for (int b = 0; b < n; ++b) {
        const T* colb = st.col.ptr() + static_cast<size_t>(b) * ckk * ohow;
        conv_backward_sample(tensor_ptr(0), colb,
                             g.ptr() + static_cast<size_t>(b) * eout.count(),
                             eout.c, ckk, ohow, grad_ptr(0), grad_ptr(1),
                             dcol.ptr());
        col2im_add(dcol.ptr(), ein.c, ein.h, ein.w, c->ksize, c->stride,
                   c->pad, eout.h, eout.w,
                   dx.ptr() + static_cast<size_t>(b) * ein.count());
      }
      g = std::move(dx);
    } else if (std::get_if<ReluLayer>(&l)) {
      for (size_t j = 0; j < g.size(); ++j)
        if (st.out[j] <= T(0)) g[j] = T(0);
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      Tensor<T> dx({n, ein.c, ein.h, ein.w});
      const int hw = ein.h * ein.w;
      const int ohw = eout.h * eout.w;
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < ein.c; ++ch) {
          size_t obase =
              (static_cast<size_t>(b) * eout.c + ch) * static_cast<size_t>(ohw);
          T* dst = dx.ptr() + (static_cast<size_t>(b) * ein.c + ch) * hw;
          for (int j = 0; j < ohw; ++j)
            dst[st.argmax[obase + j]] += g[obase + j];
        }
      (void)m;
      g = std::move(dx);
    } else if (const auto* d = std::get_if<DenseLayer>(&l)) {
      int in_features = static_cast<int>(ein.count());
      CMapM<T> x(below.ptr(), n, in_features);
      CMapM<T> go(g.ptr(), n, d->out_features);
      if (opts.param_grads) {
        MapM<T> dw(grad_ptr(0), d->out_features, in_features);
        dw.noalias() += go.transpose() * x;
        T* db = grad_ptr(1);
        for (int j = 0; j < d->out_features; ++j) db[j] += go.col(j).sum();
      }
      Tensor<T> dx(below.shape);
      MapM<T> dxm(dx.ptr(), n, in_features);
      CMapM<T> w(tensor_ptr(0), d->out_features, in_features);
      dxm.noalias() = go * w;
      g = std::move(dx);
    } else if (std::get_if<GlobalPoolLayer>(&l)) {
      Tensor<T> dx({n, ein.c, ein.h, ein.w});
      const int hw = ein.h * ein.w;
      const T inv = T(1) / static_cast<T>(hw);
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < ein.c; ++ch) {
          T v = g[static_cast<size_t>(b) * ein.c + ch] * inv;
          T* dst = dx.ptr() + (static_cast<size_t>(b) * ein.c + ch) * hw;
          for (int j = 0; j < hw; ++j) dst[j] = v;
        }
      g = std::move(dx);
    } else if (const auto* r = std::get_if<ResidualLayer>(&l)) {
      bool proj = r->stride != 1 || r->out_ch != ein.c;
      int ohow = eout.h * eout.w;
      int ckk1 = ein.c * 9;
      int ckk2 = r->out_ch * 9;
      Tensor<T> dx({n, ein.c, ein.h, ein.w});
      Tensor<T> dsum({r->out_ch, eout.h, eout.w});
      Tensor<T> dact1({r->out_ch, eout.h, eout.w});
      Tensor<T> dcol2({ckk2, ohow}), dcol1({ckk1, ohow});
      Tensor<T> dcolp;
      if (proj) dcolp = Tensor<T>({ein.c, ohow});
      for (int b = 0; b < n; ++b) {
        const T* outb = st.out.ptr() + static_cast<size_t>(b) * eout.count();
        const T* gb = g.ptr() + static_cast<size_t>(b) * eout.count();
        for (size_t j = 0; j < eout.count(); ++j)
          dsum[j] = outb[j] > T(0) ? gb[j] : T(0);
        // main branch: conv2 then relu then conv1
        conv_backward_sample(tensor_ptr(2),
                             st.col2.ptr() + static_cast<size_t>(b) * ckk2 * ohow,
                             dsum.ptr(), r->out_ch, ckk2, ohow, grad_ptr(2),
                             grad_ptr(3), dcol2.ptr());
        dact1.fill(T(0));
        col2im_add(dcol2.ptr(), r->out_ch, eout.h, eout.w, 3, 1, 1, eout.h,
                   eout.w, dact1.ptr());
        const T* act1b = st.act1.ptr() + static_cast<size_t>(b) * eout.count();
        for (size_t j = 0; j < eout.count(); ++j)
          if (act1b[j] <= T(0)) dact1[j] = T(0);
        conv_backward_sample(tensor_ptr(0),
                             st.col1.ptr() + static_cast<size_t>(b) * ckk1 * ohow,
                             dact1.ptr(), r->out_ch, ckk1, ohow, grad_ptr(0),
                             grad_ptr(1), dcol1.ptr());
        T* dxb = dx.ptr() + static_cast<size_t>(b) * ein.count();
        col2im_add(dcol1.ptr(), ein.c, ein.h, ein.w, 3, r->stride, 1, eout.h,
                   eout.w, dxb);
        // skip branch
        if (proj) {
          conv_backward_sample(tensor_ptr(4),
                               st.colp.ptr() + static_cast<size_t>(b) * ein.c * ohow,
                               dsum.ptr(), r->out_ch, ein.c, ohow, grad_ptr(4),
                               grad_ptr(5), dcolp.ptr());
          col2im_add(dcolp.ptr(), ein.c, ein.h, ein.w, 1, r->stride, 0, eout.h,
                     eout.w, dxb);
        } else {
          for (size_t j = 0; j < ein.count(); ++j) dxb[j] += dsum[j];
        }
      }
      g = std::move(dx);
    }
  }
  return result;
}

template class Engine<float>;
template class Engine<double>;

// ---------------------------------------------------------------------------
// Probabilities

template <typename T>
Mat<T> softened(const Mat<T>& logits, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("softened: tau must be > 0");
  const int n = logits.dim(0), k = logits.dim(1);
  Mat<T> p({n, k});
  const T inv_tau = static_cast<T>(1.0 / tau);
  for (int b = 0; b < n; ++b) {
    const T* z = logits.ptr() + static_cast<size_t>(b) * k;
    T* row = p.ptr() + static_cast<size_t>(b) * k;
    T zmax = z[0];
    for (int j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
    T sum = T(0);
    for (int j = 0; j < k; ++j) {
      row[j] = std::exp((z[j] - zmax) * inv_tau);
      sum += row[j];
    }
    for (int j = 0; j < k; ++j) row[j] /= sum;
  }
  return p;
}

template <typename T>
Mat<T> softmax(const Mat<T>& logits) {
  return softened(logits, 1.0);
}

template Mat<float> softmax(const Mat<float>&);
template Mat<double> softmax(const Mat<double>&);
template Mat<float> softened(const Mat<float>&, double);
template Mat<double> softened(const Mat<double>&, double);

}  // namespace spfl
