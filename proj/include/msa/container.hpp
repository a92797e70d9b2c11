#pragma once

// Binary containers for weights ("MSAT") and datasets ("MSAD").
//
// MSAT: magic, u16 version, u32 descriptor length, UTF-8 JSON descriptor,
// then every block as little-endian f64 in descriptor order.
// MSAD: magic, u16 version, u32 n, c, h, w, K, then n u16 labels and
// n*c*h*w u8 pixels.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msa/classifier.hpp"
#include "msa/controller.hpp"
#include "msa/dataset.hpp"

namespace msa {

using json = nlohmann::json;

struct CorruptContainer : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kWeightFormatVersion = 1;
inline constexpr std::uint16_t kDatasetFormatVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw CorruptContainer(what_ + ": truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                             " more, have " + std::to_string(bytes_.size() - pos_) + ")");
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace io

// ---------------------------------------------------------------------------
// Weights

struct WeightBlock {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

struct WeightContainer {
  json meta = json::object();  // free-form: kind, architecture, hyperparameters, config, seed
  std::vector<WeightBlock> blocks;

  std::vector<std::uint8_t> serialize() const {
    json desc = meta;
    desc["blocks"] = json::array();
    for (const auto& b : blocks) {
      std::size_t n = 1;
      for (auto d : b.shape) n *= d;
      if (n != b.data.size()) throw std::invalid_argument("weight block '" + b.name + "' shape does not match data");
      desc["blocks"].push_back({{"name", b.name}, {"shape", b.shape}, {"dtype", "f64"}});
    }
    const std::string text = desc.dump();
    std::vector<std::uint8_t> out{'M', 'S', 'A', 'T'};
    io::put<std::uint16_t>(out, kWeightFormatVersion);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& b : blocks)
      for (double v : b.data) io::put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
  }

  static WeightContainer deserialize(const std::vector<std::uint8_t>& bytes) {
    io::Reader r(bytes, "weight container");
    if (r.bytes(4) != "MSAT") throw CorruptContainer("weight container: bad magic");
    const auto version = r.get<std::uint16_t>();
    if (version != kWeightFormatVersion)
      throw CorruptContainer("weight container: unsupported version " + std::to_string(version));
    const auto len = r.get<std::uint32_t>();
    json desc;
    try {
      desc = json::parse(r.bytes(len));
    } catch (const json::exception& e) {
      throw CorruptContainer(std::string("weight container: descriptor is not valid JSON: ") + e.what());
    }
    if (!desc.contains("blocks") || !desc["blocks"].is_array())
      throw CorruptContainer("weight container: descriptor lacks a block list");
    WeightContainer c;
    std::size_t total = 0;
    for (const auto& jb : desc["blocks"]) {
      WeightBlock b;
      try {
        b.name = jb.at("name").get<std::string>();
        b.shape = jb.at("shape").get<std::vector<std::size_t>>();
        if (jb.value("dtype", "f64") != "f64") throw CorruptContainer("weight container: unsupported dtype");
      } catch (const json::exception& e) {
        throw CorruptContainer(std::string("weight container: malformed block entry: ") + e.what());
      }
      std::size_t n = 1;
      for (auto d : b.shape) n *= d;
      if (n > r.remaining() / sizeof(double)) throw CorruptContainer("weight container: block '" + b.name + "' exceeds the payload");
      total += n;
      b.data.resize(n);
      c.blocks.push_back(std::move(b));
    }
    if (r.remaining() != total * sizeof(double))
      throw CorruptContainer("weight container: payload has " + std::to_string(r.remaining()) + " bytes, descriptor declares " +
                             std::to_string(total * sizeof(double)));
    for (auto& b : c.blocks)
      for (double& v : b.data) v = std::bit_cast<double>(r.get<std::uint64_t>());
    desc.erase("blocks");
    c.meta = std::move(desc);
    return c;
  }

  void save(const std::string& path) const { io::write_file(path, serialize()); }
  static WeightContainer load(const std::string& path) { return deserialize(io::read_file(path)); }

  const WeightBlock& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw CorruptContainer("weight container: missing block '" + name + "'");
  }
};

inline void append_network(WeightContainer& c, const std::string& prefix, const nn::Network& net) {
  std::size_t i = 0;
  for (const auto& layer : net.layers()) {
    std::visit(
        [&](const auto& L) {
          std::vector<std::size_t> wshape;
          if constexpr (std::is_same_v<std::decay_t<decltype(L)>, nn::DenseLayer>)
            wshape = {L.out, L.in};
          else
            wshape = {L.out_c, L.in_c, L.kernel, L.kernel};
          const std::string base = prefix + "layer" + std::to_string(i);
          c.blocks.push_back({base + ".weight", wshape, L.weight});
          c.blocks.push_back({base + ".bias", {L.bias.size()}, L.bias});
        },
        layer);
    ++i;
  }
}

inline void read_network(const WeightContainer& c, const std::string& prefix, nn::Network& net) {
  std::vector<double> flat;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i);
    for (const char* part : {".weight", ".bias"}) {
      const auto& b = c.block(base + part);
      flat.insert(flat.end(), b.data.begin(), b.data.end());
    }
  }
  if (flat.size() != net.parameter_count())
    throw CorruptContainer("weight container: parameter count " + std::to_string(flat.size()) + " does not match " +
                           std::to_string(net.parameter_count()));
  net.set_flat_parameters(flat);
}

inline WeightContainer classifier_container(const Classifier& f, json extra = json::object()) {
  WeightContainer c;
  c.meta = std::move(extra);
  c.meta["kind"] = "classifier";
  c.meta["architecture"] = to_string(f.architecture());
  const Shape s = f.input_shape();
  c.meta["input_shape"] = {s.c, s.h, s.w};
  c.meta["num_classes"] = f.num_classes();
  append_network(c, "", f.network());
  return c;
}

inline Classifier classifier_from_container(const WeightContainer& c) {
  if (c.meta.value("kind", "") != "classifier") throw CorruptContainer("weight container does not hold a classifier");
  const auto shp = c.meta.at("input_shape").get<std::vector<std::size_t>>();
  if (shp.size() != 3) throw CorruptContainer("classifier input_shape must have three entries");
  Classifier f(architecture_from_string(c.meta.at("architecture").get<std::string>()), Shape{shp[0], shp[1], shp[2]},
               c.meta.at("num_classes").get<std::size_t>());
  read_network(c, "", f.network());
  return f;
}

inline json to_json(const ControllerHyper& h) {
  return {{"gamma", h.gamma}, {"r0", h.r0}, {"p_min", h.p_min}, {"temperature", h.temperature},
          {"time_budget", h.time_budget}};
}

inline ControllerHyper hyper_from_json(const json& j) {
  ControllerHyper h;
  h.gamma = j.value("gamma", h.gamma);
  h.r0 = j.value("r0", h.r0);
  h.p_min = j.value("p_min", h.p_min);
  h.temperature = j.value("temperature", h.temperature);
  h.time_budget = j.value("time_budget", h.time_budget);
  return h;
}

inline WeightContainer controller_container(const ControllerParams& p, json extra = json::object()) {
  WeightContainer c;
  c.meta = std::move(extra);
  c.meta["kind"] = "controllers";
  c.meta["hyper"] = to_json(p.hyper);
  c.meta["mlp"] = {2, 10, 10, 1};
  append_network(c, "size.", p.size_net);
  append_network(c, "color.", p.color_net);
  return c;
}

inline ControllerParams controllers_from_container(const WeightContainer& c) {
  if (c.meta.value("kind", "") != "controllers") throw CorruptContainer("weight container does not hold controllers");
  ControllerParams p;
  p.hyper = hyper_from_json(c.meta.value("hyper", json::object()));
  read_network(c, "size.", p.size_net);
  read_network(c, "color.", p.color_net);
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
  d.validate();
  std::vector<std::uint8_t> out{'M', 'S', 'A', 'D'};
  io::put<std::uint16_t>(out, kDatasetFormatVersion);
  for (std::size_t v : {d.size(), d.shape.c, d.shape.h, d.shape.w, d.num_classes})
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  for (auto l : d.labels) io::put<std::uint16_t>(out, l);
  out.insert(out.end(), d.pixels.begin(), d.pixels.end());
  return out;
}

inline Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes, "dataset container");
  if (r.bytes(4) != "MSAD") throw CorruptContainer("dataset container: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetFormatVersion)
    throw CorruptContainer("dataset container: unsupported version " + std::to_string(version));
  const std::size_t n = r.get<std::uint32_t>();
  Dataset d;
  d.shape.c = r.get<std::uint32_t>();
  d.shape.h = r.get<std::uint32_t>();
  d.shape.w = r.get<std::uint32_t>();
  d.num_classes = r.get<std::uint32_t>();
  const std::size_t expect = n * 2 + n * d.shape.size();
  if (r.remaining() != expect)
    throw CorruptContainer("dataset container: payload has " + std::to_string(r.remaining()) + " bytes, header declares " +
                           std::to_string(expect));
  d.labels.resize(n);
  for (auto& l : d.labels) l = r.get<std::uint16_t>();
  const std::string px = r.bytes(n * d.shape.size());
  d.pixels.assign(px.begin(), px.end());
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw CorruptContainer(std::string("dataset container: ") + e.what());
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) { io::write_file(path, serialize_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(io::read_file(path)); }

}  // namespace msa
