#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "marl.hpp"

namespace marl::testing {

/// Fresh scratch directory per test, removed on teardown.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = std::filesystem::temp_directory_path() /
            ("marl_" + std::string(info->test_suite_name()) + "_" + info->name());
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Training config over the gradient-check micro model; runs in well under
/// a second per iteration.
inline TrainConfig micro_train_config(const std::filesystem::path& out) {
  TrainConfig c;
  c.model = micro_model_config();
  c.mask_select = 2;
  c.diffusion_select = 2;
  c.trajectories = 2;
  c.k_percent = 50.0;
  c.group_size = 3;
  c.prompts_per_step = 2;
  c.iterations = 4;
  c.checkpoint_every = 2;
  c.eval_every = 2;
  c.eval_samples = 2;
  c.lr = 1e-2;
  c.clip_eps = 0.2;
  c.templates = "";
  c.base_checkpoint = "";
  c.output_dir = out.string();
  return c;
}

inline MarModel micro_base(std::uint64_t seed = 5) {
  MarModel m(micro_model_config(), seed);
  jitter_params(m, 11, 0.1);
  return m;
}

inline std::vector<double> flat_params(const MarModel& m) {
  std::vector<double> v;
  for (const auto& [name, t] : m.params()) v.insert(v.end(), t.vec().begin(), t.vec().end());
  return v;
}

}  // namespace marl::testing
