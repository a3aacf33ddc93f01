#include <cmath>

#include "binary_io.hpp"
#include "naln/datapipe.hpp"
#include "naln/error.hpp"

namespace naln {

namespace {
constexpr char kMagic[4] = {'E', 'E', 'G', 'T'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_eegt(const TrialSet& trials) {
  trials.validate();
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  binio::put_u32(out, kVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(trials.n_trials()));
  binio::put_u32(out, static_cast<std::uint32_t>(trials.n_channels()));
  binio::put_u32(out, static_cast<std::uint32_t>(trials.n_samples()));
  binio::put_f32(out, static_cast<float>(trials.fs_hz));
  binio::put_u32(out, static_cast<std::uint32_t>(trials.n_classes));
  binio::put_u32(out, static_cast<std::uint32_t>(trials.dataset_id));
  binio::put_u32(out, static_cast<std::uint32_t>(trials.channel_names.size()));
  for (const auto& name : trials.channel_names) {
    if (name.size() > 0xffff) throw DataError("channel name longer than 65535 bytes");
    binio::put_u16(out, static_cast<std::uint16_t>(name.size()));
    binio::put_bytes(out, name);
  }
  for (int l : trials.labels) binio::put_u32(out, static_cast<std::uint32_t>(l));
  for (int s : trials.subject_ids) binio::put_u32(out, static_cast<std::uint32_t>(s));
  for (double v : trials.data.data()) binio::put_f32(out, static_cast<float>(v));
  return out;
}

TrialSet decode_eegt(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes, "EEGT");
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version), 4);
  const std::uint32_t n = r.u32("n_trials");
  const std::uint32_t c = r.u32("n_channels");
  const std::uint32_t t = r.u32("n_samples");
  const std::size_t fs_at = r.offset();
  const float fs = r.f32("fs");
  if (!(fs > 0) || !std::isfinite(fs)) r.fail("sampling rate must be positive", fs_at);
  TrialSet out;
  out.fs_hz = fs;
  out.n_classes = static_cast<int>(r.u32("n_classes"));
  out.dataset_id = static_cast<int>(r.u32("dataset_id"));
  const std::size_t names_at = r.offset();
  const std::uint32_t n_names = r.u32("channel count");
  if (n_names != c) r.fail("channel-name count " + std::to_string(n_names) + " != n_channels " + std::to_string(c), names_at);
  for (std::uint32_t i = 0; i < n_names; ++i) {
    const std::uint16_t len = r.u16("channel name length");
    out.channel_names.push_back(r.bytes(len, "channel name"));
  }
  // Size check up front so a bogus header cannot trigger a huge allocation.
  const std::uint64_t payload = 8ull * n + 4ull * n * c * t;
  r.need(static_cast<std::size_t>(std::min<std::uint64_t>(payload, bytes.size() + 1)), "trial payload");
  const std::size_t labels_at = r.offset();
  for (std::uint32_t i = 0; i < n; ++i) out.labels.push_back(static_cast<std::int32_t>(r.u32("labels")));
  for (std::uint32_t i = 0; i < n; ++i) out.subject_ids.push_back(static_cast<std::int32_t>(r.u32("subject_ids")));
  std::vector<double> data(static_cast<std::size_t>(n) * c * t);
  for (auto& v : data) v = r.f32("data");
  if (!r.at_end()) r.fail("trailing bytes", r.offset());
  out.data = Tensor({n, c, t}, std::move(data));
  try {
    out.validate();
  } catch (const DataError& e) {
    r.fail(e.what(), labels_at);
  }
  return out;
}

void write_eegt(const TrialSet& trials, const std::string& path) { binio::write_file(path, encode_eegt(trials)); }

TrialSet read_eegt(const std::string& path) { return decode_eegt(binio::read_file(path)); }

}  // namespace naln
