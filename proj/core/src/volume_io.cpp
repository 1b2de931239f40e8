#include "cascade/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume payload I/O assumes a little-endian host");

namespace cascade {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_volume(const Volume& v, const std::string& header_path) {
  validate_volume(v);
  fs::path hdr(header_path);
  fs::path raw = hdr;
  raw.replace_extension(".raw");

  std::ofstream h(hdr);
  if (!h) throw IoError("cannot open " + header_path + " for writing");
  h << "dims = " << v.nx << " " << v.ny << " " << v.nz << "\n";
  h << "spacing = " << fmt_double(v.sx) << " " << fmt_double(v.sy) << " " << fmt_double(v.sz) << "\n";
  h << "origin = " << fmt_double(v.origin.x) << " " << fmt_double(v.origin.y) << " "
    << fmt_double(v.origin.z) << "\n";
  h << "data = " << raw.filename().string() << "\n";
  if (!h) throw IoError("failed writing header " + header_path);
  h.close();

  std::vector<std::int16_t> payload(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i)
    payload[i] = static_cast<std::int16_t>(std::lrintf(v.data[i]));
  std::ofstream r(raw, std::ios::binary);
  if (!r) throw IoError("cannot open " + raw.string() + " for writing");
  r.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(std::int16_t)));
  if (!r) throw IoError("failed writing payload " + raw.string());
}

Volume read_volume(const std::string& header_path) {
  std::ifstream h(header_path);
  if (!h) throw IoError("cannot open " + header_path);

  Volume v;
  bool got_dims = false, got_spacing = false, got_origin = false;
  std::string data_name;
  std::string line;
  while (std::getline(h, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed header line: '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      s = (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(val);
    std::istringstream iss(val);
    if (key == "dims") {
      if (!(iss >> v.nx >> v.ny >> v.nz)) throw IoError("malformed dims line");
      got_dims = true;
    } else if (key == "spacing") {
      if (!(iss >> v.sx >> v.sy >> v.sz)) throw IoError("malformed spacing line");
      got_spacing = true;
    } else if (key == "origin") {
      if (!(iss >> v.origin.x >> v.origin.y >> v.origin.z)) throw IoError("malformed origin line");
      got_origin = true;
    } else if (key == "data") {
      data_name = val;
    } else {
      throw IoError("unknown header key '" + key + "'");
    }
  }
  if (!got_dims || !got_spacing || !got_origin || data_name.empty())
    throw IoError("header " + header_path + " is missing required fields");
  if (v.nx < 1 || v.ny < 1 || v.nz < 1) throw ValidationError("header dims must be >= 1");
  if (!(v.sx > 0 && v.sy > 0 && v.sz > 0)) throw ValidationError("header spacing must be > 0");

  fs::path raw = fs::path(header_path).parent_path() / data_name;
  std::ifstream r(raw, std::ios::binary);
  if (!r) throw IoError("cannot open payload " + raw.string());
  r.seekg(0, std::ios::end);
  auto bytes = static_cast<std::size_t>(r.tellg());
  r.seekg(0);
  std::size_t expected = v.size() * sizeof(std::int16_t);
  if (bytes != expected)
    throw IoError("payload " + raw.string() + " holds " + std::to_string(bytes) +
                  " bytes, header declares " + std::to_string(expected));
  std::vector<std::int16_t> payload(v.size());
  r.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(expected));
  if (!r) throw IoError("failed reading payload " + raw.string());

  v.data.resize(v.size());
  for (std::size_t i = 0; i < payload.size(); ++i) v.data[i] = static_cast<float>(payload[i]);
  validate_volume(v);
  return v;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> rle_encode(const std::vector<std::uint32_t>& sorted) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> runs;
  for (std::size_t i = 0; i < sorted.size();) {
    std::uint32_t start = sorted[i];
    std::uint32_t len = 1;
    while (i + len < sorted.size() && sorted[i + len] == start + len) ++len;
    runs.emplace_back(start, len);
    i += len;
  }
  return runs;
}

std::vector<std::uint32_t> rle_decode(const std::vector<std::pair<std::uint32_t, std::uint32_t>>& runs) {
  std::vector<std::uint32_t> out;
  for (auto [start, len] : runs)
    for (std::uint32_t i = 0; i < len; ++i) out.push_back(start + i);
  return out;
}

void write_lesions(const std::vector<GroundTruthLesion>& lesions, const std::string& path) {
  json arr = json::array();
  for (const auto& l : lesions) {
    double r_eq = std::cbrt(3.0 * l.volume_mm3 / (4.0 * 3.14159265358979323846));
    json runs = json::array();
    for (auto [s, n] : rle_encode(l.voxel_mask)) runs.push_back({s, n});
    arr.push_back({{"center", {l.center.x, l.center.y, l.center.z}},
                   {"radius_mm", r_eq},
                   {"volume_mm3", l.volume_mm3},
                   {"mask_rle", runs}});
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << json{{"lesions", arr}}.dump(2) << "\n";
}

std::vector<GroundTruthLesion> read_lesions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed lesion file " + path + ": " + e.what());
  }
  std::vector<GroundTruthLesion> out;
  for (const auto& e : j.at("lesions")) {
    GroundTruthLesion l;
    l.center = {e.at("center")[0], e.at("center")[1], e.at("center")[2]};
    l.volume_mm3 = e.at("volume_mm3");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> runs;
    for (const auto& r : e.at("mask_rle")) runs.emplace_back(r[0], r[1]);
    l.voxel_mask = rle_decode(runs);
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace cascade
