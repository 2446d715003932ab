#pragma once

// Line-delimited JSON metrics, one object per iteration. Wall-clock time
// goes to a separate file so the metrics stream itself is reproducible.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "marl/errors.hpp"

namespace marl {

inline constexpr int kMetricsSchema = 1;

struct MetricsRecord {
  std::size_t iteration = 0;
  double reward_mean = 0.0;
  double reward_max = 0.0;
  std::optional<double> heldout_reward;
  double kl = 0.0;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::optional<double> grad_variance;
  double clip_fraction = 0.0;
  std::size_t exp_clamp_hits = 0;
  double kappa_fraction = 0.0;
  double mask_fraction = 0.0;
  std::size_t empty_kappa_terms = 0;

  nlohmann::json to_json(const std::string& fingerprint) const {
    nlohmann::json j;
    j["schema"] = kMetricsSchema;
    j["config"] = fingerprint;
    j["iteration"] = iteration;
    j["reward_mean"] = reward_mean;
    j["reward_max"] = reward_max;
    j["heldout_reward"] = heldout_reward ? nlohmann::json(*heldout_reward) : nlohmann::json();
    j["kl"] = kl;
    j["objective"] = objective;
    j["grad_norm"] = grad_norm;
    j["grad_variance"] = grad_variance ? nlohmann::json(*grad_variance) : nlohmann::json();
    j["clip_fraction"] = clip_fraction;
    j["exp_clamp_hits"] = exp_clamp_hits;
    j["kappa_fraction"] = kappa_fraction;
    j["mask_fraction"] = mask_fraction;
    j["empty_kappa_terms"] = empty_kappa_terms;
    return j;
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.iteration = j.at("iteration");
    r.reward_mean = j.at("reward_mean");
    r.reward_max = j.at("reward_max");
    if (!j.at("heldout_reward").is_null()) r.heldout_reward = j.at("heldout_reward").get<double>();
    r.kl = j.at("kl");
    r.objective = j.value("objective", 0.0);
    r.grad_norm = j.at("grad_norm");
    if (j.contains("grad_variance") && !j.at("grad_variance").is_null()) r.grad_variance = j.at("grad_variance").get<double>();
    r.clip_fraction = j.value("clip_fraction", 0.0);
    r.exp_clamp_hits = j.value("exp_clamp_hits", std::size_t{0});
    r.kappa_fraction = j.value("kappa_fraction", 0.0);
    r.mask_fraction = j.value("mask_fraction", 0.0);
    r.empty_kappa_terms = j.value("empty_kappa_terms", std::size_t{0});
    return r;
  }
};

/// Appends whole lines with a single write and flush each.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::string fingerprint)
      : path_(path), fingerprint_(std::move(fingerprint)) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, std::ios::app | std::ios::binary);
    if (!os_) throw IoError("cannot open metrics file '" + path.string() + "'");
  }

  void write(const MetricsRecord& r) {
    if (last_ && r.iteration <= *last_) throw SequencingError("metrics iterations must increase");
    const std::string line = r.to_json(fingerprint_).dump() + "\n";
    os_.write(line.data(), static_cast<std::streamsize>(line.size()));
    os_.flush();
    if (!os_) throw IoError("failed writing metrics to '" + path_.string() + "'");
    last_ = r.iteration;
  }

  void set_last_iteration(std::optional<std::size_t> it) { last_ = it; }

 private:
  std::filesystem::path path_;
  std::string fingerprint_;
  std::ofstream os_;
  std::optional<std::size_t> last_;
};

struct MetricsFile {
  std::vector<MetricsRecord> records;
  std::vector<std::string> fingerprints;
  std::size_t skipped = 0;
};

/// Parses a metrics file; malformed lines are skipped and counted.
inline MetricsFile read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read metrics file '" + path.string() + "'");
  MetricsFile out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.records.push_back(MetricsRecord::from_json(j));
      out.fingerprints.push_back(j.value("config", ""));
    } catch (const std::exception&) {
      ++out.skipped;
    }
  }
  return out;
}

/// Drops every line whose iteration exceeds `last`, so a resumed run
/// continues the stream exactly where its checkpoint left off.
inline void truncate_metrics(const std::filesystem::path& path, std::optional<std::size_t> last) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream is(path, std::ios::binary);
  std::string kept, line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (last && j.at("iteration").get<std::size_t>() <= *last) kept += line + "\n";
    } catch (const std::exception&) {
    }
  }
  is.close();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os << kept;
    if (!os) throw IoError("cannot rewrite metrics file '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace marl
