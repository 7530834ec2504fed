// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "akt/model.hpp"

namespace akt {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

std::string float_text(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

float parse_float(const std::string& s, std::size_t offset) {
  float v = 0.0f;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("bad float '" + s + "' in checkpoint header", offset);
  }
  return v;
}

std::size_t parse_size(const std::string& s, std::size_t offset) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("bad integer '" + s + "' in checkpoint header", offset);
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta) {
  const ModelConfig& cfg = model.config();
  const QuantSpec& q = model.quant_spec();
  std::ostringstream h;
  h << "stages=" << cfg.stages << '\n'
    << "blocks_per_stage=" << cfg.blocks_per_stage << '\n'
    << "base_channels=" << cfg.base_channels << '\n'
    << "num_classes=" << cfg.num_classes << '\n'
    << "input=" << cfg.in_channels << 'x' << cfg.in_height << 'x' << cfg.in_width << '\n'
    << "tap_point=" << tap_point_name(cfg.tap_point) << '\n'
    << "bn_frozen=" << (model.bn_frozen() ? 1 : 0) << '\n'
    << "weight_bits=" << q.weight_bits << '\n'
    << "act_bits=" << q.act_bits << '\n'
    << "act_ema_momentum=" << float_text(q.act_ema_momentum) << '\n';
  h << "skip=";
  for (std::size_t i = 0; i < q.skip.size(); ++i) h << (i ? "," : "") << q.skip[i];
  h << '\n';
  for (const ActQuantizer* a : model.activation_quantizers()) {
    if (a->tracker.initialized()) {
      h << "act_range." << a->name << '=' << float_text(a->tracker.x_min()) << ','
        << float_text(a->tracker.x_max()) << '\n';
    }
  }
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("checkpoint metadata '" + k + "' contains '=' or newline");
    }
    h << "meta." << k << '=' << v << '\n';
  }
  const auto state = model.state();
  for (const auto& t : state) h << "tensor=" << t.name << ':' << shape_text(t.tensor.shape()) << '\n';
  const std::string header = h.str();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : state) {
    for (float v : t.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint truncated in preamble", bytes.size());
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic (expected AKTC)", 0);
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      4);
  }
  const std::size_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + header_len) {
    throw FormatError("checkpoint truncated inside header of " + std::to_string(header_len) +
                          " bytes",
                      bytes.size());
  }
  const std::string header(reinterpret_cast<const char*>(bytes.data() + 12), header_len);

  ModelConfig cfg;
  QuantSpec q;
  bool bn_frozen = false;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, std::pair<float, float>>> ranges;
  std::vector<std::pair<std::string, Shape>> tensors;

  std::size_t line_start = 12;
  for (const std::string& line : split(header, '\n')) {
    const std::size_t at = line_start;
    line_start += line.size() + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("header line without '='", at);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "stages") cfg.stages = parse_size(val, at);
    else if (key == "blocks_per_stage") cfg.blocks_per_stage = parse_size(val, at);
    else if (key == "base_channels") cfg.base_channels = parse_size(val, at);
    else if (key == "num_classes") cfg.num_classes = parse_size(val, at);
    else if (key == "input") {
      auto dims = split(val, 'x');
      if (dims.size() != 3) throw FormatError("bad input shape '" + val + "'", at);
      cfg.in_channels = parse_size(dims[0], at);
      cfg.in_height = parse_size(dims[1], at);
      cfg.in_width = parse_size(dims[2], at);
    } else if (key == "tap_point") {
      try {
        cfg.tap_point = parse_tap_point(val);
      } catch (const ConfigError& e) {
        throw FormatError(e.what(), at);
      }
    } else if (key == "bn_frozen") bn_frozen = val == "1";
    else if (key == "weight_bits") q.weight_bits = static_cast<int>(parse_size(val, at));
    else if (key == "act_bits") q.act_bits = static_cast<int>(parse_size(val, at));
    else if (key == "act_ema_momentum") q.act_ema_momentum = parse_float(val, at);
    else if (key == "skip") {
      if (!val.empty()) q.skip = split(val, ',');
    } else if (key.rfind("act_range.", 0) == 0) {
      auto parts = split(val, ',');
      if (parts.size() != 2) throw FormatError("bad activation range '" + val + "'", at);
      ranges.push_back({key.substr(10), {parse_float(parts[0], at), parse_float(parts[1], at)}});
    } else if (key.rfind("meta.", 0) == 0) {
      meta[key.substr(5)] = val;
    } else if (key == "tensor") {
      const auto colon = val.rfind(':');
      if (colon == std::string::npos) throw FormatError("bad tensor entry '" + val + "'", at);
      Shape shape;
      for (const auto& d : split(val.substr(colon + 1), 'x')) shape.push_back(parse_size(d, at));
      tensors.push_back({val.substr(0, colon), shape});
    } else {
      throw FormatError("unknown checkpoint header key '" + key + "'", at);
    }
  }

  Model model = [&] {
    try {
      Model m = Model::build(cfg, 0);
      if (q.enabled() || !q.skip.empty()) m.apply_quantization(q);
      return m;
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint header describes an invalid model: ") + e.what(), 12);
    }
  }();
  model.set_bn_frozen(bn_frozen);

  const auto expected = model.state();
  if (expected.size() != tensors.size()) {
    throw FormatError("checkpoint lists " + std::to_string(tensors.size()) +
                          " tensors, model needs " + std::to_string(expected.size()),
                      12);
  }
  std::size_t offset = 12 + header_len;
  std::vector<NamedTensor> state;
  state.reserve(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, shape] = tensors[i];
    if (name != expected[i].name || shape != expected[i].tensor.shape()) {
      throw FormatError("tensor '" + name + "' does not match model layout ('" +
                            expected[i].name + "')",
                        12);
    }
    const std::size_t n = shape_numel(shape);
    if (bytes.size() < offset + 4 * n) {
      throw FormatError("checkpoint truncated in tensor '" + name + "'", bytes.size());
    }
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      values[k] = std::bit_cast<float>(get_u32(bytes, offset + 4 * k));
    }
    offset += 4 * n;
    state.push_back({name, Tensor(shape, std::move(values))});
  }
  if (offset != bytes.size()) {
    throw FormatError("trailing bytes after last tensor", offset);
  }
  model.load_state(state);

  for (const auto& [name, range] : ranges) {
    bool found = false;
    for (ActQuantizer* a : model.activation_quantizers()) {
      if (a->name == name) {
        a->tracker.set_range(range.first, range.second);
        found = true;
      }
    }
    if (!found) throw FormatError("activation range for unknown quantizer '" + name + "'", 12);
  }
  return LoadedCheckpoint{std::move(model), std::move(meta)};
}

void save_checkpoint(const Model& model, const std::string& path, const CheckpointMeta& meta) {
  const auto bytes = encode_checkpoint(model, meta);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Model load_checkpoint(const std::string& path) { return std::move(read_checkpoint(path).model); }

}  // namespace akt
