#pragma once

#include <string>
#include <vector>

namespace mf {

using CsvRow = std::vector<std::string>;

// Minimal CSV: comma-separated, double-quote escaping, tolerant of CRLF.
std::vector<CsvRow> read_csv(const std::string& path);
std::vector<CsvRow> parse_csv(const std::string& text);
void write_csv(const std::string& path, const std::vector<CsvRow>& rows);
std::string csv_escape(const std::string& field);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace mf
