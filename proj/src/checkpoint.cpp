#include "debiaslens/checkpoint.hpp"

#include <cmath>

#include "byte_io.hpp"
#include "debiaslens/checksum.hpp"
#include "debiaslens/errors.hpp"
#include "file_util.hpp"

namespace debiaslens {

namespace {

constexpr char kMagic[8] = {'D', 'B', 'L', 'S', 'A', 'E', '0', '1'};

using json = nlohmann::json;

std::string payload_of(const SaeParams& p) {
  std::string out;
  const auto d = p.w_enc.rows();
  const auto om = p.w_enc.cols();
  out.reserve(4 * static_cast<std::size_t>(2 * d * om + 2 * d));
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < om; ++c) detail::put_f32(out, static_cast<float>(p.w_enc(r, c)));
  for (Eigen::Index r = 0; r < om; ++r)
    for (Eigen::Index c = 0; c < d; ++c) detail::put_f32(out, static_cast<float>(p.w_dec(r, c)));
  for (Eigen::Index i = 0; i < d; ++i) detail::put_f32(out, static_cast<float>(p.b1[i]));
  for (Eigen::Index i = 0; i < d; ++i) detail::put_f32(out, static_cast<float>(p.b2[i]));
  return out;
}

}  // namespace

std::string checkpoint_id(const SaeParams& params) { return sha256_hex(payload_of(params)); }

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.params.validate();
  const auto payload = payload_of(ckpt.params);
  json header = {{"format_version", kCheckpointVersion},
                 {"d", ckpt.params.d()},
                 {"omega", ckpt.params.omega()},
                 {"k", ckpt.k},
                 {"prefix_schedule", ckpt.params.prefix_schedule},
                 {"train_config", ckpt.train_config},
                 {"payload_sha256", sha256_hex(payload)}};
  const auto text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || bytes.compare(0, sizeof kMagic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("checkpoint does not start with magic DBLSAE01");
  }
  if (bytes.size() < 12) throw CorruptionError("checkpoint truncated inside header");
  const std::size_t header_len = detail::get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + header_len) throw CorruptionError("checkpoint header truncated");

  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  std::size_t d = 0, omega = 0;
  std::string expected;
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint format version " + header.at("format_version").dump());
    }
    d = header.at("d").get<std::size_t>();
    omega = header.at("omega").get<std::size_t>();
    ckpt.k = header.at("k").get<std::size_t>();
    ckpt.params.prefix_schedule = header.at("prefix_schedule").get<std::vector<std::size_t>>();
    ckpt.train_config = header.value("train_config", json::object());
    expected = header.at("payload_sha256").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  const std::size_t floats = 2 * d * omega + 2 * d;
  const std::size_t start = 12 + header_len;
  if (bytes.size() < start + 4 * floats) throw CorruptionError("checkpoint payload truncated");
  if (bytes.size() > start + 4 * floats) throw FormatError("trailing bytes after checkpoint payload");
  const std::string payload = bytes.substr(start);
  if (sha256_hex(payload) != expected) throw CorruptionError("checkpoint payload checksum mismatch");

  const char* p = payload.data();
  auto next = [&p] {
    const double v = detail::get_f32(p);
    p += 4;
    return v;
  };
  const auto dd = static_cast<Eigen::Index>(d);
  const auto om = static_cast<Eigen::Index>(omega);
  auto& prm = ckpt.params;
  prm.w_enc.resize(dd, om);
  prm.w_dec.resize(om, dd);
  prm.b1.resize(dd);
  prm.b2.resize(dd);
  for (Eigen::Index r = 0; r < dd; ++r)
    for (Eigen::Index c = 0; c < om; ++c) prm.w_enc(r, c) = next();
  for (Eigen::Index r = 0; r < om; ++r)
    for (Eigen::Index c = 0; c < dd; ++c) prm.w_dec(r, c) = next();
  for (Eigen::Index i = 0; i < dd; ++i) prm.b1[i] = next();
  for (Eigen::Index i = 0; i < dd; ++i) prm.b2[i] = next();
  prm.validate();
  if (ckpt.k < 1 || ckpt.k > omega) throw ValidationError("checkpoint k outside [1, omega]");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace debiaslens
