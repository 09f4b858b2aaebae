#include "mrw/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mrw {
namespace {

uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

uint16_t read_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | p[1] << 8);
}

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8 & 0xff));
  out.push_back(static_cast<char>(v >> 16 & 0xff));
  out.push_back(static_cast<char>(v >> 24 & 0xff));
}

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8 & 0xff));
}

}  // namespace

std::vector<double> read_wav(const std::string& path, int expected_rate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("wav: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("wav: " + path + " is not a RIFF/WAVE file");

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  std::vector<double> samples;
  bool have_data = false;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    char id[5] = {0};
    std::memcpy(id, bytes.data() + pos, 4);
    const uint32_t size = read_u32(bytes.data() + pos + 4);
    const size_t body = pos + 8;
    if (body + size > bytes.size())
      throw std::runtime_error("wav: truncated chunk '" + std::string(id) + "' in " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16) throw std::runtime_error("wav: malformed fmt chunk in " + path);
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("wav: data chunk before fmt in " + path);
      if (format != 1) throw std::runtime_error("wav: " + path + " is not PCM (format " +
                                                std::to_string(format) + ")");
      if (channels != 1) throw std::runtime_error("wav: " + path + " has " +
                                                  std::to_string(channels) +
                                                  " channels; expected mono");
      if (bits != 16) throw std::runtime_error("wav: " + path + " has " + std::to_string(bits) +
                                               "-bit samples; expected 16");
      if (static_cast<int>(rate) != expected_rate)
        throw std::runtime_error("wav: " + path + " sampled at " + std::to_string(rate) +
                                 " Hz; expected " + std::to_string(expected_rate));
      const size_t count = size / 2;
      samples.resize(count);
      for (size_t i = 0; i < count; ++i) {
        const int16_t v = static_cast<int16_t>(read_u16(bytes.data() + body + 2 * i));
        samples[i] = static_cast<double>(v) / 32768.0;
      }
      have_data = true;
    }
    pos = body + size + (size & 1);  // chunks are word-aligned
  }
  if (!have_data) throw std::runtime_error("wav: no data chunk in " + path);
  return samples;
}

void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate) {
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(sample_rate));
  put_u32(out, static_cast<uint32_t>(sample_rate) * 2);  // byte rate
  put_u16(out, 2);                                       // block align
  put_u16(out, 16);                                      // bits
  out += "data";
  put_u32(out, data_bytes);
  for (double v : samples) {
    const double clamped = std::clamp(v, -1.0, 1.0);
    const int scaled = static_cast<int>(std::lround(clamped * 32767.0));
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(scaled)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("wav: write failed for " + path);
}

}  // namespace mrw
