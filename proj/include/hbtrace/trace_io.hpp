#pragma once

#include <filesystem>
#include <string>

#include "hbtrace/trace.hpp"

namespace hbt {

// On-disk trace format: line-delimited JSON, one header record carrying the
// format version, metadata and run_id, then one record per event (parents
// inline). See docs/trace-format.md. Requires a finalized trace.
std::string serialize(const Trace& trace);

// Throws Errc::FormatVersionMismatch on an unknown format/version and
// Errc::CorruptRecord (with the record index) on anything else wrong,
// including truncation and a header run_id that does not match the content.
Trace deserialize(std::string_view text);

void write_trace_file(const Trace& trace, const std::filesystem::path& path);
Trace read_trace_file(const std::filesystem::path& path);

}  // namespace hbt
