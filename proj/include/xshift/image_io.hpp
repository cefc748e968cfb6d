#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// Binary PPM (P6) and PGM (P5) readers/writers, maxval 255. The writer emits
// a canonical header; the reader accepts whitespace and '#' comments and
// reports parse failures with the byte offset.

namespace xshift {

struct PixelBuffer {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 3 for PPM, 1 for PGM
    std::vector<std::uint8_t> bytes;  // row-major, interleaved channels
};

namespace detail {

class ByteReader {
  public:
    explicit ByteReader(std::vector<char> bytes, std::string name)
        : bytes_(std::move(bytes)), name_(std::move(name)) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error(name_ + ": parse error at byte " + std::to_string(pos_) + ": " + what);
    }

    int peek() const { return pos_ < bytes_.size() ? static_cast<unsigned char>(bytes_[pos_]) : -1; }
    int get() { return pos_ < bytes_.size() ? static_cast<unsigned char>(bytes_[pos_++]) : -1; }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const char* cursor() const { return bytes_.data() + pos_; }
    void advance(std::size_t n) { pos_ += n; }

    void skip_space_and_comments() {
        while (true) {
            int c = peek();
            if (c == '#') {
                while (c != -1 && c != '\n') c = get();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
            } else {
                return;
            }
        }
    }

    std::size_t read_uint() {
        skip_space_and_comments();
        if (peek() < '0' || peek() > '9') fail("expected unsigned integer");
        std::size_t v = 0;
        while (peek() >= '0' && peek() <= '9') v = v * 10 + static_cast<std::size_t>(get() - '0');
        return v;
    }

  private:
    std::vector<char> bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline PixelBuffer read_netpbm(const std::filesystem::path& path, char expected_kind) {
    ByteReader r(slurp(path), path.string());
    if (r.get() != 'P') r.fail("bad magic");
    int kind = r.get();
    if (kind != expected_kind) r.fail(std::string("expected P") + expected_kind + " magic");
    PixelBuffer buf;
    buf.width = r.read_uint();
    buf.height = r.read_uint();
    std::size_t maxval = r.read_uint();
    if (maxval != 255) r.fail("maxval must be 255, got " + std::to_string(maxval));
    int sep = r.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') r.fail("expected single whitespace after maxval");
    buf.channels = expected_kind == '6' ? 3 : 1;
    const std::size_t need = buf.width * buf.height * buf.channels;
    if (r.remaining() < need)
        r.fail("truncated pixel data, need " + std::to_string(need) + " bytes, have " +
               std::to_string(r.remaining()));
    if (r.remaining() > need) r.fail("trailing bytes after pixel data");
    buf.bytes.resize(need);
    std::copy_n(r.cursor(), need, reinterpret_cast<char*>(buf.bytes.data()));
    return buf;
}

inline void write_netpbm(const std::filesystem::path& path, const PixelBuffer& buf, char kind) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P" << kind << "\n" << buf.width << " " << buf.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(buf.bytes.data()), static_cast<std::streamsize>(buf.bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace detail

inline PixelBuffer read_ppm(const std::filesystem::path& path) { return detail::read_netpbm(path, '6'); }
inline PixelBuffer read_pgm(const std::filesystem::path& path) { return detail::read_netpbm(path, '5'); }

inline void write_ppm(const std::filesystem::path& path, const PixelBuffer& buf) {
    if (buf.channels != 3 || buf.bytes.size() != buf.width * buf.height * 3)
        throw std::invalid_argument("write_ppm: buffer is not interleaved RGB");
    detail::write_netpbm(path, buf, '6');
}

inline void write_pgm(const std::filesystem::path& path, const PixelBuffer& buf) {
    if (buf.channels != 1 || buf.bytes.size() != buf.width * buf.height)
        throw std::invalid_argument("write_pgm: buffer is not single-channel");
    detail::write_netpbm(path, buf, '5');
}

inline std::uint8_t quantize_unit(double v) {
    double q = v * 255.0;
    if (q < 0.0) q = 0.0;
    if (q > 255.0) q = 255.0;
    return static_cast<std::uint8_t>(q + 0.5);
}

}  // namespace xshift
