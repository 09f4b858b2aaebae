#pragma once

#include <string>
#include <vector>

namespace mrw {

// 16 kHz mono 16-bit PCM RIFF only; anything else is rejected with a
// descriptive error. Samples are in [-1, 1].
std::vector<double> read_wav(const std::string& path, int expected_rate = 16000);
void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate = 16000);

}  // namespace mrw
