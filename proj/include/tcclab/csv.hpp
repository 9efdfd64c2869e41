#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcclab/config.hpp"

namespace tcclab {

// Deterministic CSV accumulator: fixed header, rows appended in call order,
// doubles rendered with shortest round-trip formatting.
class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header) : width_(header.size()) {
        append_row(header);
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != width_) throw std::invalid_argument("csv: row width mismatch");
        append_row(cells);
    }

    const std::string& text() const { return text_; }

    void write(const std::string& path) const {
        std::ofstream file(path, std::ios::binary | std::ios::trunc);
        if (!file) throw std::runtime_error("csv: cannot open '" + path + "'");
        file.write(text_.data(), static_cast<std::streamsize>(text_.size()));
        if (!file) throw std::runtime_error("csv: write failed for '" + path + "'");
    }

  private:
    void append_row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i > 0) text_.push_back(',');
            text_ += cells[i];
        }
        text_.push_back('\n');
    }

    std::size_t width_;
    std::string text_;
};

inline std::string csv_cell(double v) { return format_double(v); }
inline std::string csv_cell(int v) { return std::to_string(v); }
inline std::string csv_cell(std::size_t v) { return std::to_string(v); }

}  // namespace tcclab
