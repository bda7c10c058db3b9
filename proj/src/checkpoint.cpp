#include "coregen/checkpoint.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace coregen {

namespace {

constexpr char kMagic[4] = {'C', 'G', 'C', 'K'};
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"dropout_rate", c.dropout_rate},
          {"label_smoothing", c.label_smoothing},
          {"tie_output", c.tie_output}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  c.tie_output = j.at("tie_output").get<bool>();
  return c;
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  nlohmann::ordered_json header;
  header["version"] = kVersion;
  header["config"] = config_to_json(store.config);
  header["stage"] = stage_tag_name(store.stage);
  header["seed"] = store.seed;
  header["step"] = store.step;
  auto& arrays = header["arrays"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < store.array_count(); ++i) {
    arrays.push_back({{"name", store.name(i)},
                      {"rows", store.array(i).rows()},
                      {"cols", store.array(i).cols()}});
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out.write(kMagic, 4);
  const std::uint32_t header_len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), 4);
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  std::vector<double> row_major;
  for (std::size_t i = 0; i < store.array_count(); ++i) {
    const Matrix& m = store.array(i);
    row_major.resize(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) row_major[k++] = m(r, c);
    }
    out.write(reinterpret_cast<const char*>(row_major.data()),
              static_cast<std::streamsize>(row_major.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path);
}

ParameterStore load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);

  char magic[4];
  std::uint32_t header_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&header_len), 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::VersionMismatch, "not a checkpoint file: " + path);
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw Error(ErrorCode::IoFailure, "truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::VersionMismatch, "corrupt header in " + path);
  }
  ModelConfig config;
  StageTag stage;
  std::uint64_t seed;
  std::int64_t step;
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> table;
  try {
    if (header.at("version").get<int>() != kVersion) {
      throw Error(ErrorCode::VersionMismatch,
                  "unsupported checkpoint version in " + path);
    }
    config = config_from_json(header.at("config"));
    stage = stage_tag_from_name(header.at("stage").get<std::string>());
    seed = header.at("seed").get<std::uint64_t>();
    step = header.at("step").get<std::int64_t>();
    for (const auto& entry : header.at("arrays")) {
      table.emplace_back(entry.at("name").get<std::string>(),
                         entry.at("rows").get<Eigen::Index>(),
                         entry.at("cols").get<Eigen::Index>());
    }
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::VersionMismatch, "malformed header in " + path);
  }
  if (expected && !(config == *expected)) {
    throw Error(ErrorCode::ShapeMismatch,
                "checkpoint config does not match the expected config");
  }

  ParameterStore store;
  store.config = config;
  store.stage = stage;
  store.seed = seed;
  store.step = step;
  std::vector<double> row_major;
  for (const auto& [name, rows, cols] : table) {
    if (rows <= 0 || cols <= 0) {
      throw Error(ErrorCode::VersionMismatch, "bad array shape in " + path);
    }
    Matrix& m = store.add(name, rows, cols);
    row_major.resize(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(row_major.data()),
            static_cast<std::streamsize>(row_major.size() * sizeof(double)));
    if (!in) throw Error(ErrorCode::IoFailure, "truncated payload in " + path);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row_major[k++];
    }
  }
  return store;
}

}  // namespace coregen
