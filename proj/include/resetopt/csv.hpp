#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "resetopt/common.hpp"

namespace resetopt {

// %.17g: shortest fixed format that round-trips binary64 exactly, so a value
// re-parsed from a CSV equals the value that produced it bit for bit. Output
// bytes are therefore identical across reruns with the same inputs.
inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string fmt_opt(const std::optional<double>& x) {
    return x ? fmt_double(*x) : std::string{};
}

class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::string& header,
              const std::string& config_hash = {}) {
        out_.open(path);
        if (!out_) throw IoError("CsvWriter: cannot open " + path);
        if (!config_hash.empty()) out_ << "# config_hash=" << config_hash << "\n";
        out_ << header << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << "\n";
    }

    void close() {
        out_.close();
        if (out_.fail()) throw IoError("CsvWriter: write failed");
    }

  private:
    std::ofstream out_;
};

struct CsvTable {
    std::string config_hash;  // empty when the file has no hash line
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw FormatError("CSV: no column named " + name);
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_csv: cannot open " + path);
    CsvTable table;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("# config_hash=", 0) == 0) {
            table.config_hash = line.substr(14);
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (!have_header) {
            table.columns = std::move(cells);
            have_header = true;
        } else {
            table.rows.push_back(std::move(cells));
        }
    }
    if (!have_header) throw FormatError("read_csv: " + path + " has no header row");
    return table;
}

}  // namespace resetopt
