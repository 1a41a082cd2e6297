#pragma once

#include <algorithm>
#include <cctype>
#include <deque>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"

namespace reid::risk {

enum class RiskLevel { regulatory_violation, no_direct_risk, low, elevated, high };

inline const char* to_string(RiskLevel l) {
  switch (l) {
    case RiskLevel::regulatory_violation: return "regulatory_violation";
    case RiskLevel::no_direct_risk: return "no_direct_risk";
    case RiskLevel::low: return "low";
    case RiskLevel::elevated: return "elevated";
    case RiskLevel::high: return "high";
  }
  return "?";
}

/// Severity order used for escalation and monotonicity checks.
inline int severity(RiskLevel l) {
  switch (l) {
    case RiskLevel::no_direct_risk: return 0;
    case RiskLevel::low: return 1;
    case RiskLevel::elevated: return 2;
    case RiskLevel::high: return 3;
    case RiskLevel::regulatory_violation: return 4;
  }
  return -1;
}

struct RiskQuestionnaire {
  bool phi_removed = false;
  bool previously_published = false;
  std::optional<bool> same_tumor_as_published;
  std::optional<bool> other_tumor_available;
  std::optional<bool> metadata_published_with_images;
  std::optional<bool> prior_dataset_breached;
};

struct RiskVerdict {
  RiskLevel level = RiskLevel::no_direct_risk;
  std::vector<std::string> rationale;
  std::vector<std::string> recommendations;

  friend bool operator==(const RiskVerdict&, const RiskVerdict&) = default;

  nlohmann::json to_json() const {
    return {{"level", to_string(level)}, {"rationale", rationale}, {"recommendations", recommendations}};
  }
};

/// Questions in the order they are asked.
struct Question {
  const char* key;
  const char* prompt;
};

inline constexpr Question kQuestions[] = {
    {"phi_removed",
     "Has PHI been removed everywhere (slide metadata, filenames, scanned slide tags, text in the image)?"},
    {"previously_published", "Has data from this patient been included in a previous dataset publication?"},
    {"same_tumor_as_published", "Do the images originate from the same tumor as the published ones?"},
    {"metadata_published_with_images", "Is medical metadata published along with the images?"},
    {"other_tumor_available", "Are sections from another tumor of the same patient available?"},
    {"prior_dataset_breached", "Has a dataset containing this patient suffered a privacy breach?"},
};

namespace detail {

inline bool need(const std::optional<bool>& v, const char* key) {
  if (!v) fail(ErrorKind::invalid_input, std::string("missing answer to question '") + key + "'");
  return *v;
}

inline RiskLevel raise(RiskLevel l) {
  switch (l) {
    case RiskLevel::low: return RiskLevel::elevated;
    case RiskLevel::elevated:
    case RiskLevel::high: return RiskLevel::high;
    default: return l;
  }
}

}  // namespace detail

/// Applies the rules in fixed order. Answers to questions that are not
/// reachable are ignored.
inline RiskVerdict assess(const RiskQuestionnaire& q) {
  RiskVerdict v;
  if (!q.phi_removed) {
    v.level = RiskLevel::regulatory_violation;
    v.rationale.emplace_back(
        "R1 de-identification incomplete: without removal of PHI from metadata, filenames, slide tags and the image "
        "itself one risks the violation of GDPR or HIPAA guidelines");
    v.recommendations.emplace_back("remove PHI from slide metadata, filenames, scanned slide tags and image content "
                                   "before any release");
    return v;
  }
  v.rationale.emplace_back("R1 de-identification complete");

  if (!q.previously_published) {
    v.level = RiskLevel::no_direct_risk;
    v.rationale.emplace_back(
        "R2 not previously published: if the images have not been previously published and the data has been "
        "properly anonymized, there is no direct risk to the patient's privacy");
    v.recommendations.emplace_back("record which images and metadata of this patient are published");
    return v;
  }

  const bool same_tumor = detail::need(q.same_tumor_as_published, "same_tumor_as_published");
  if (!same_tumor) {
    v.level = RiskLevel::low;
    v.rationale.emplace_back(
        "R3 previously published, different tumor: the risk of re-identification is reduced if sections from "
        "another tumor of the same patient are used");
    v.recommendations.emplace_back("keep using sections from a tumor other than the published one");
  } else {
    const bool metadata = detail::need(q.metadata_published_with_images, "metadata_published_with_images");
    const bool other_tumor = detail::need(q.other_tumor_available, "other_tumor_available");
    if (!metadata) {
      v.level = RiskLevel::elevated;
      v.rationale.emplace_back(
          "R4 previously published, same tumor: re-identification is considerably more successful between images "
          "of the same tumor");
    } else {
      v.level = RiskLevel::high;
      v.rationale.emplace_back(
          "R5 previously published, same tumor, with metadata: the tumor tissue might be used as a key to link the "
          "datasets and hence the risk of re-identification increases");
      v.recommendations.emplace_back("do not publish metadata that differs from what was already published for this "
                                     "patient");
    }
    if (other_tumor)
      v.recommendations.emplace_back("prefer sections from another tumor of the same patient");
    else
      v.recommendations.emplace_back("consider using each patient in only one data publication");
  }

  const bool breached = detail::need(q.prior_dataset_breached, "prior_dataset_breached");
  if (breached) {
    v.level = detail::raise(v.level);
    v.rationale.emplace_back(
        "R6 prior breach: privacy breaches of datasets in which the patient was included have to be taken into "
        "account; level raised one step");
    v.recommendations.emplace_back("assume breached data can be linked to this release");
  }
  return v;
}

inline bool parse_answer(std::string token, bool& out) {
  std::transform(token.begin(), token.end(), token.begin(), [](unsigned char c) { return std::tolower(c); });
  if (token == "y" || token == "yes" || token == "true" || token == "1") {
    out = true;
    return true;
  }
  if (token == "n" || token == "no" || token == "false" || token == "0") {
    out = false;
    return true;
  }
  return false;
}

/// Reads `key = yes|no` lines; '#' starts a comment. Unknown keys are errors.
inline RiskQuestionnaire parse_questionnaire(std::istream& in) {
  RiskQuestionnaire q;
  bool have_phi = false, have_pub = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::invalid_input, "questionnaire line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    bool value = false;
    if (!parse_answer(trim(line.substr(eq + 1)), value))
      fail(ErrorKind::invalid_input, "questionnaire line " + std::to_string(lineno) + ": answer must be yes or no");
    if (key == "phi_removed") {
      q.phi_removed = value;
      have_phi = true;
    } else if (key == "previously_published") {
      q.previously_published = value;
      have_pub = true;
    } else if (key == "same_tumor_as_published") {
      q.same_tumor_as_published = value;
    } else if (key == "other_tumor_available") {
      q.other_tumor_available = value;
    } else if (key == "metadata_published_with_images") {
      q.metadata_published_with_images = value;
    } else if (key == "prior_dataset_breached") {
      q.prior_dataset_breached = value;
    } else {
      std::string keys;
      for (const auto& qq : kQuestions) keys += std::string(keys.empty() ? "" : ", ") + qq.key;
      fail(ErrorKind::invalid_input, "unknown questionnaire key '" + key + "' (valid: " + keys + ")");
    }
  }
  if (!have_phi) fail(ErrorKind::invalid_input, "missing answer to question 'phi_removed'");
  if (q.phi_removed && !have_pub) fail(ErrorKind::invalid_input, "missing answer to question 'previously_published'");
  return q;
}

inline RiskQuestionnaire read_questionnaire(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open questionnaire " + path.string());
  return parse_questionnaire(in);
}

inline std::string format_verdict(const RiskVerdict& v) {
  std::ostringstream out;
  out << "risk level: " << to_string(v.level) << "\n";
  out << "rationale:\n";
  for (const auto& r : v.rationale) out << "  - " << r << "\n";
  out << "recommendations:\n";
  for (const auto& r : v.recommendations) out << "  - " << r << "\n";
  return out.str();
}

/// Asks only reachable questions, re-prompting on invalid answers. Answers may
/// be separated by whitespace, commas or newlines.
inline RiskVerdict interactive_assess(std::istream& in, std::ostream& out) {
  std::deque<std::string> pending;
  auto next_token = [&]() -> std::optional<std::string> {
    while (pending.empty()) {
      std::string line;
      if (!std::getline(in, line)) return std::nullopt;
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      for (std::string t; ls >> t;) pending.push_back(t);
    }
    auto t = pending.front();
    pending.pop_front();
    return t;
  };
  auto ask = [&](std::size_t i) {
    for (;;) {
      out << kQuestions[i].prompt << " [y/n] " << std::flush;
      auto token = next_token();
      if (!token) fail(ErrorKind::invalid_input, "input ended before the questionnaire was complete");
      bool value = false;
      if (parse_answer(*token, value)) {
        out << "\n";
        return value;
      }
      out << "\nplease answer y or n\n";
    }
  };

  RiskQuestionnaire q;
  q.phi_removed = ask(0);
  if (q.phi_removed) {
    q.previously_published = ask(1);
    if (q.previously_published) {
      q.same_tumor_as_published = ask(2);
      if (*q.same_tumor_as_published) {
        q.metadata_published_with_images = ask(3);
        q.other_tumor_available = ask(4);
      }
      q.prior_dataset_breached = ask(5);
    }
  }
  const RiskVerdict v = assess(q);
  out << format_verdict(v);
  return v;
}

}  // namespace reid::risk
