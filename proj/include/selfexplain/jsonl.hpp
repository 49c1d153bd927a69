#pragma once

// JSONL file helpers. All writes go through a temp-file-then-rename so
// concurrent readers never observe a half-written file.

#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "selfexplain/error.hpp"

namespace selfexplain {

using json = nlohmann::json;

struct JsonlLine {
    std::size_t line_no = 0; // 1-based
    json value;
};

inline std::vector<JsonlLine> read_jsonl_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open file: " + path.string());
    std::vector<JsonlLine> lines;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        json value = json::parse(line, nullptr, false);
        if (value.is_discarded()) {
            throw Error(ErrorKind::validation, path.string() + ":" +
                                                   std::to_string(line_no) +
                                                   ": malformed JSON line");
        }
        lines.push_back({line_no, std::move(value)});
    }
    return lines;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void atomic_write_file(const std::filesystem::path& path,
                              const std::string& content) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    static std::atomic<std::uint64_t> counter{0};
    std::random_device rd;
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(rd()) + "." +
           std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write file: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw Error(ErrorKind::io, "short write: " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error(ErrorKind::io, "cannot rename into place: " + path.string());
    }
}

// Incremental line writer for run records: one flushed line per append, so
// an interrupted run leaves a readable prefix on disk.
class JsonlWriter {
public:
    JsonlWriter() = default;

    void open(const std::filesystem::path& path) {
        namespace fs = std::filesystem;
        std::error_code ec;
        if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw Error(ErrorKind::io, "cannot open for write: " + path.string());
    }

    bool is_open() const { return out_.is_open(); }

    void append(const json& value) {
        out_ << value.dump() << '\n';
        out_.flush();
        if (!out_) throw Error(ErrorKind::io, "write failed on record file");
    }

private:
    std::ofstream out_;
};

} // namespace selfexplain
