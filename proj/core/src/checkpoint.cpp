#include "f2d/checkpoint.hpp"

#include "f2d/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace f2d {

namespace {

constexpr const char* kMagic = "F2DCKPT";

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in native order");

}  // namespace

const Eigen::MatrixXd& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const std::string& kind,
                      const nlohmann::json& metadata, const nn::NamedParameters& params) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["kind"] = kind;
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, p] : params) {
    header["tensors"].push_back({{"name", name}, {"rows", p.rows()}, {"cols", p.cols()}});
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kMagic << '\n' << header.dump() << '\n';
  for (const auto& [name, p] : params) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p.value();
    out.write(reinterpret_cast<const char*>(rm.data()),
              static_cast<std::streamsize>(rm.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kMagic) throw ParseError("not a checkpoint file: " + path.string(), 1);
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), 2);
  }
  Checkpoint ckpt;
  ckpt.format_version = header.at("format_version").get<int>();
  if (ckpt.format_version != kCheckpointFormatVersion) {
    throw ConfigError("unsupported checkpoint format version " +
                      std::to_string(ckpt.format_version));
  }
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.metadata = header.at("metadata");
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    in.read(reinterpret_cast<char*>(rm.data()),
            static_cast<std::streamsize>(rm.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint payload in " + path.string());
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), Eigen::MatrixXd(rm));
  }
  return ckpt;
}

void load_parameters(const Checkpoint& ckpt, const nn::NamedParameters& params) {
  for (const auto& [name, p] : params) {
    const Eigen::MatrixXd& src = ckpt.tensor(name);
    if (src.rows() != p.rows() || src.cols() != p.cols()) {
      throw ShapeError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    ag::Var(p).mutable_value() = src;
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace f2d
