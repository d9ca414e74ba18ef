#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sfnmt/config.hpp"
#include "sfnmt/model.hpp"
#include "sfnmt/training.hpp"

namespace sfnmt {

// Binary checkpoint: magic + version, the full config (as the textual config
// format, so it is inspectable with `strings`), training step, data-order RNG
// state, every parameter tensor by name, and the Adam moments. All numeric
// payloads are little-endian fixed-width; loading restores training bitwise.

inline constexpr char kCheckpointMagic[8] = {'s', 'f', 'n', 'm', 't', 'c', 'k', '1'};

namespace detail {

template <class U>
void write_pod(std::ostream& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_pod(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw InputError("checkpoint: unexpected end of file");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  auto n = read_pod<std::uint64_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw InputError("checkpoint: unexpected end of file");
  return s;
}

template <class T>
void write_values(std::ostream& out, const std::vector<T>& v) {
  write_pod<std::uint64_t>(out, v.size());
  for (T x : v) {
    double d = static_cast<double>(x);
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_pod<std::uint64_t>(out, bits);
  }
}

template <class T>
std::vector<T> read_values(std::istream& in) {
  auto n = read_pod<std::uint64_t>(in);
  std::vector<T> v(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t bits = read_pod<std::uint64_t>(in);
    double d;
    std::memcpy(&d, &bits, 8);
    v[i] = static_cast<T>(d);
  }
  return v;
}

}  // namespace detail

struct TrainState {
  std::size_t step = 0;
  Rng data_rng;
};

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model,
                     const TrainConfig& tc, const OptimState& opt,
                     const Rng& data_rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open checkpoint for write: " + path);
  out.write(kCheckpointMagic, 8);

  std::ostringstream cfg_text;
  write_config(FullConfig{model.cfg, tc}, cfg_text);
  detail::write_string(out, cfg_text.str());

  detail::write_pod<std::uint64_t>(out, opt.step);
  detail::write_pod<std::uint64_t>(out, data_rng.seed());
  detail::write_pod<std::uint64_t>(out, data_rng.stream());
  detail::write_pod<std::uint64_t>(out, data_rng.counter());

  detail::write_pod<std::uint64_t>(out, model.params.names.size());
  for (const auto& name : model.params.names) {
    const Tensor<T>& t = model.params.at(name);
    detail::write_string(out, name);
    detail::write_pod<std::uint64_t>(out, t.ndim());
    for (std::size_t d = 0; d < t.ndim(); ++d)
      detail::write_pod<std::uint64_t>(out, t.dim(d));
    detail::write_values(out, t.data());
  }
  for (const auto& m : opt.m) detail::write_values(out, m);
  for (const auto& v : opt.v) detail::write_values(out, v);
  if (!out) throw InputError("checkpoint write failed: " + path);
}

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  TrainConfig train;
  OptimState opt;
  Rng data_rng;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw InputError("not a checkpoint file: " + path);

  std::istringstream cfg_text(detail::read_string(in));
  FullConfig cfg = parse_config(cfg_text, path + "#config");

  LoadedCheckpoint<T> ck;
  ck.train = cfg.training;
  ck.opt.step = detail::read_pod<std::uint64_t>(in);
  std::uint64_t seed = detail::read_pod<std::uint64_t>(in);
  std::uint64_t stream = detail::read_pod<std::uint64_t>(in);
  std::uint64_t counter = detail::read_pod<std::uint64_t>(in);
  ck.data_rng = Rng(seed, stream, counter);

  Rng unused_init;
  ck.model = Model<T>::init(cfg.model, unused_init);
  auto n_params = detail::read_pod<std::uint64_t>(in);
  if (n_params != ck.model.params.names.size())
    throw InputError("checkpoint parameter count mismatch in " + path + ": have " +
                     std::to_string(n_params) + ", config implies " +
                     std::to_string(ck.model.params.names.size()));
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = detail::read_string(in);
    if (name != ck.model.params.names[i])
      throw InputError("checkpoint parameter order mismatch in " + path + ": " +
                       name + " vs " + ck.model.params.names[i]);
    Tensor<T>& t = ck.model.params.at(name);
    auto ndim = detail::read_pod<std::uint64_t>(in);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::uint64_t>(in);
    if (shape != t.shape())
      throw InputError("checkpoint shape mismatch for " + name + " in " + path +
                       ": " + shape_str(shape) + " vs " + shape_str(t.shape()));
    auto values = detail::read_values<T>(in);
    t.mutable_data() = std::move(values);
  }
  for (std::uint64_t i = 0; i < n_params; ++i)
    ck.opt.m.push_back(detail::read_values<double>(in));
  for (std::uint64_t i = 0; i < n_params; ++i)
    ck.opt.v.push_back(detail::read_values<double>(in));
  return ck;
}

}  // namespace sfnmt
