#pragma once

#include <string>
#include <vector>

#include "cascade/volume.hpp"

namespace cascade {

/// Writes the two-file volume pair: a text header at `header_path` (.hdr) and
/// a little-endian int16 raw payload next to it (same stem, .raw). Values are
/// rounded to the nearest integer HU; integer-valued volumes round-trip
/// bit-exactly.
void write_volume(const Volume& v, const std::string& header_path);

/// Reads a volume written by write_volume. Throws IoError on malformed
/// headers or a payload that does not match the declared dims, and
/// ValidationError on invalid dims/spacing.
Volume read_volume(const std::string& header_path);

/// Ground-truth sidecar: one JSON file per volume with center, equivalent
/// radius, volume_mm3 and a run-length-encoded voxel mask per lesion.
void write_lesions(const std::vector<GroundTruthLesion>& lesions, const std::string& path);
std::vector<GroundTruthLesion> read_lesions(const std::string& path);

/// Run-length encoding over sorted linear voxel indices, as [start, len] pairs.
std::vector<std::pair<std::uint32_t, std::uint32_t>> rle_encode(const std::vector<std::uint32_t>& sorted_indices);
std::vector<std::uint32_t> rle_decode(const std::vector<std::pair<std::uint32_t, std::uint32_t>>& runs);

}  // namespace cascade
