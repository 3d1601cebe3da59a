#include "structlm/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <json.hpp>

#include "structlm/config.hpp"
#include "structlm/errors.hpp"

namespace structlm {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

void write_doubles(std::ofstream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::ifstream& in, double* p, std::size_t n, const std::string& path) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) throw DataError(path + ": truncated checkpoint");
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, std::size_t step, const AdamState* optimizer,
                     const std::map<std::string, std::string>& extra) {
  KeyValueConfig kv;
  write_model_config(model.config(), kv);
  nlohmann::json header;
  header["config"] = kv.values();
  header["seed"] = model.seed();
  header["step"] = step;
  header["has_optimizer"] = optimizer != nullptr;
  header["optimizer_step"] = optimizer ? optimizer->t : 0;
  header["extra"] = extra;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : model.parameters()) manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  header["parameters"] = manifest;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out << kCheckpointMagic << '\n' << header.dump() << '\n';
    for (const auto& p : model.parameters()) write_doubles(out, p.tensor.data().data(), p.tensor.numel());
    if (optimizer) {
      if (!optimizer->matches(model.parameters())) throw DimensionError("optimizer state does not match model");
      for (const auto& m : optimizer->m) write_doubles(out, m.data(), m.size());
      for (const auto& v : optimizer->v) write_doubles(out, v.data(), v.size());
    }
    if (!out) throw DataError("failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw DataError(path + ": not a " + std::string(kCheckpointMagic) + " file");
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }

  Checkpoint ck;
  try {
    KeyValueConfig kv;
    for (const auto& [k, v] : header.at("config").items()) kv.set(k, v.get<std::string>());
    ModelConfig cfg = read_model_config(kv);
    ck.model = Model::build(cfg, header.at("seed").get<std::uint64_t>());
    ck.step = header.at("step").get<std::size_t>();
    ck.extra = header.value("extra", std::map<std::string, std::string>{});
    const auto& manifest = header.at("parameters");
    const auto& params = ck.model.parameters();
    if (manifest.size() != params.size()) throw DataError(path + ": parameter manifest does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (manifest[i].at("name").get<std::string>() != params[i].name ||
          manifest[i].at("shape").get<Shape>() != params[i].tensor.shape()) {
        throw DataError(path + ": parameter manifest disagrees at " + params[i].name);
      }
    }
    for (const auto& p : params) {
      Tensor t = p.tensor;
      read_doubles(in, t.mutable_data().data(), t.numel(), path);
    }
    if (header.at("has_optimizer").get<bool>()) {
      AdamState s = AdamState::zeros_like(params);
      s.t = header.at("optimizer_step").get<std::size_t>();
      for (auto& m : s.m) read_doubles(in, m.data(), m.size(), path);
      for (auto& v : s.v) read_doubles(in, v.data(), v.size(), path);
      ck.optimizer = std::move(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(path + ": stored config is invalid: " + e.what());
  }
  if (in.peek() != std::ifstream::traits_type::eof()) throw DataError(path + ": trailing bytes after payload");
  return ck;
}

}  // namespace structlm
