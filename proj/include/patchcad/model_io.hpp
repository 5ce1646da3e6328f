#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "patchcad/binary_io.hpp"
#include "patchcad/config.hpp"
#include "patchcad/embed.hpp"
#include "patchcad/pose.hpp"

namespace patchcad {

struct PoseModel {
  PoseBins bins;
  PoseHeadParams head;
};

struct Model {
  TowerParams towers;
  std::optional<PoseModel> pose;
  std::optional<Config> config;
};

inline constexpr std::uint32_t kModelVersion = 1;

// P2CM layout, all little-endian:
//   "P2CM" u32 version u32 d_in_image u32 d_in_shape u32 hidden u32 embed
//   f32 image W1 (d_in x hidden, row-major), b1, W2 (hidden x embed), b2
//   f32 shape W1, b1, W2, b2
// followed by optional tagged sections:
//   "POSE" u32 K u32 F, K x 4 f32 medoids (w,x,y,z),
//          (K+6) x F f32 weights (row-major), (K+6) f32 bias
//   "CONF" u32 byte length, UTF-8 JSON of the effective config
inline void write_model(std::ostream& os, const Model& m) {
  TowerParams p = m.towers;
  io::write_magic(os, "P2CM");
  io::write_u32(os, kModelVersion);
  io::write_u32(os, static_cast<std::uint32_t>(p.image.input_dim()));
  io::write_u32(os, static_cast<std::uint32_t>(p.shape.input_dim()));
  io::write_u32(os, static_cast<std::uint32_t>(p.image.hidden_dim()));
  io::write_u32(os, static_cast<std::uint32_t>(p.image.embed_dim()));
  p.for_each_block([&](double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) io::write_f32(os, static_cast<float>(data[i]));
  });
  if (m.pose) {
    const auto& head = m.pose->head;
    io::write_magic(os, "POSE");
    io::write_u32(os, static_cast<std::uint32_t>(head.bins()));
    io::write_u32(os, static_cast<std::uint32_t>(head.feature_dim()));
    for (const auto& r : m.pose->bins.medoids) {
      for (double c : r.wxyz()) io::write_f32(os, static_cast<float>(c));
    }
    for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < head.weight.cols(); ++c) io::write_f32(os, static_cast<float>(head.weight(r, c)));
    }
    for (Eigen::Index r = 0; r < head.bias.size(); ++r) io::write_f32(os, static_cast<float>(head.bias(r)));
  }
  if (m.config) {
    io::write_magic(os, "CONF");
    io::write_blob(os, dump_config(*m.config));
  }
}

inline Model read_model(std::istream& is) {
  io::expect_magic(is, "P2CM");
  const std::uint32_t version = io::read_u32(is);
  if (version != kModelVersion) throw Error("bad_version", "unsupported model version " + std::to_string(version));
  const std::uint32_t d_img = io::read_u32(is);
  const std::uint32_t d_shape = io::read_u32(is);
  const std::uint32_t hidden = io::read_u32(is);
  const std::uint32_t embed = io::read_u32(is);
  if (std::uint64_t{d_img} * hidden > (1u << 26) || std::uint64_t{d_shape} * hidden > (1u << 26) ||
      std::uint64_t{hidden} * embed > (1u << 26)) {
    throw Error("bad_model", "model dimensions too large");
  }
  Model m;
  m.towers = {Tower::zeros(d_img, hidden, embed), Tower::zeros(d_shape, hidden, embed)};
  m.towers.for_each_block([&](double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = io::read_f32(is);
  });
  while (true) {
    char tag[4];
    is.read(tag, 4);
    if (is.gcount() == 0 && is.eof()) break;
    if (is.gcount() != 4) throw Error("truncated_file", "truncated model section tag");
    const std::string t(tag, 4);
    if (t == "POSE") {
      const std::uint32_t k = io::read_u32(is);
      const std::uint32_t f = io::read_u32(is);
      if (k < 2 || std::uint64_t{k + 6} * f > (1u << 26)) throw Error("bad_model", "bad pose section size");
      PoseModel pm;
      for (std::uint32_t i = 0; i < k; ++i) {
        Rotation r;
        r.w = io::read_f32(is);
        r.x = io::read_f32(is);
        r.y = io::read_f32(is);
        r.z = io::read_f32(is);
        pm.bins.medoids.push_back(r);
      }
      pm.head.weight.resize(k + 6, f);
      pm.head.bias.resize(k + 6);
      for (Eigen::Index r = 0; r < pm.head.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < pm.head.weight.cols(); ++c) pm.head.weight(r, c) = io::read_f32(is);
      }
      for (Eigen::Index r = 0; r < pm.head.bias.size(); ++r) pm.head.bias(r) = io::read_f32(is);
      m.pose = std::move(pm);
    } else if (t == "CONF") {
      m.config = parse_config(io::read_blob(is));
    } else {
      throw Error("bad_model", "unknown model section '" + t + "'");
    }
  }
  return m;
}

inline void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write model " + path);
  write_model(out, m);
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open model " + path);
  return read_model(in);
}

}  // namespace patchcad
