#include "spotopt/goals.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"

namespace spotopt {

void DoseInterval::validate() const {
  if (!(lo >= 0.0) || !(hi >= lo) || !std::isfinite(hi))
    throw std::invalid_argument("dose interval must satisfy 0 <= lo <= hi");
}

const ClinicalGoal* ClinicalGoalTable::find(const std::string& structure) const {
  for (const auto& g : goals)
    if (g.structure == structure) return &g;
  return nullptr;
}

void ClinicalGoalTable::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& g : goals) {
    if (g.structure.empty()) throw std::invalid_argument("goal with empty structure name");
    if (!seen.insert(g.structure).second)
      throw std::invalid_argument("duplicate goal for " + g.structure);
    if (g.kind == ObjectiveKind::d_min)
      throw std::invalid_argument("goal kind must be d_max or d_mean: " + g.structure);
    if (!(g.d_clinic >= 0.0) || !std::isfinite(g.d_clinic))
      throw std::invalid_argument("bad dose limit for " + g.structure);
    g.interval.validate();
  }
}

ClinicalGoalTable ClinicalGoalTable::builtin() {
  using K = ObjectiveKind;
  ClinicalGoalTable t;
  t.goals = {
      {"SpinalCord", K::d_max, 45.0, {0.0, 10.0}},
      {"OpticChiasm", K::d_max, 54.0, {0.0, 20.0}},
      {"OpticNerve", K::d_max, 54.0, {0.0, 20.0}},
      {"BrainStem", K::d_max, 54.0, {0.0, 20.0}},
      {"BrainStem_Core", K::d_max, 54.0, {0.0, 20.0}},
      {"Bone_Mandible", K::d_max, 60.0, {0.0, 20.0}},
      {"BrachialPlex", K::d_max, 63.0, {0.0, 20.0}},
      {"Brain", K::d_max, 60.0, {0.0, 20.0}},
      {"Lens", K::d_max, 10.0, {0.0, 0.0}},
      {"Cochlea", K::d_max, 45.0, {0.0, 10.0}},
      {"Pituitary", K::d_max, 56.0, {0.0, 20.0}},
      {"Esophagus", K::d_max, 60.0, {0.0, 20.0}},
      {"Lobe_Temporal", K::d_max, 60.0, {0.0, 20.0}},
      {"Retina", K::d_max, 50.0, {0.0, 15.0}},
      {"VocalCords", K::d_max, 60.0, {0.0, 20.0}},
      {"Carotid", K::d_max, 54.0, {0.0, 20.0}},
      {"SpinalCanal", K::d_max, 45.0, {0.0, 10.0}},
      {"Skin", K::d_max, 54.0, {0.0, 20.0}},
      {"Eye", K::d_max, 50.0, {0.0, 15.0}},
      {"Ear_IntMid", K::d_mean, 40.0, {0.0, 15.0}},
      {"Cavity_Oral", K::d_mean, 35.0, {0.0, 10.0}},
      {"Glnd_Lacrimal", K::d_mean, 35.0, {0.0, 15.0}},
      {"Oropharynx", K::d_mean, 45.0, {0.0, 20.0}},
      {"Glnd_Submand", K::d_mean, 45.0, {0.0, 20.0}},
      {"Glnd_Thyroid", K::d_mean, 45.0, {0.0, 20.0}},
      {"Larynx", K::d_mean, 45.0, {0.0, 20.0}},
      {"Lips", K::d_mean, 26.0, {0.0, 5.0}},
      {"Cornea", K::d_mean, 45.0, {0.0, 20.0}},
      {"Lungs", K::d_mean, 20.0, {0.0, 5.0}},
      {"Musc_Constrict", K::d_mean, 45.0, {0.0, 20.0}},
      {"Nasopharynx", K::d_mean, 45.0, {0.0, 20.0}},
      {"Parotid", K::d_mean, 30.0, {0.0, 10.0}},
  };
  return t;
}

std::string goals_to_json(const ClinicalGoalTable& t) {
  t.validate();
  nlohmann::json root;
  root["version"] = "goals/1";
  auto& rows = root["goals"] = nlohmann::json::array();
  for (const auto& g : t.goals) {
    nlohmann::json row;
    row["structure"] = g.structure;
    row["kind"] = to_string(g.kind);
    row["d_clinic_gy"] = g.d_clinic;
    row["interval_gy"] = {g.interval.lo, g.interval.hi};
    rows.push_back(std::move(row));
  }
  return root.dump(2) + "\n";
}

ClinicalGoalTable goals_from_json(const std::string& text) {
  const auto root = nlohmann::json::parse(text);
  if (root.at("version").get<std::string>() != "goals/1")
    throw std::runtime_error("unsupported goals table version");
  ClinicalGoalTable t;
  for (const auto& row : root.at("goals")) {
    ClinicalGoal g;
    g.structure = row.at("structure").get<std::string>();
    g.kind = objective_kind_from_string(row.at("kind").get<std::string>());
    g.d_clinic = row.at("d_clinic_gy").get<double>();
    const auto iv = row.at("interval_gy").get<std::vector<double>>();
    if (iv.size() != 2) throw std::runtime_error("bad interval for " + g.structure);
    g.interval = {iv[0], iv[1]};
    t.goals.push_back(std::move(g));
  }
  t.validate();
  return t;
}

void save_goals(const ClinicalGoalTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write goals table: " + path);
  out << goals_to_json(t);
  if (!out) throw std::runtime_error("short write to " + path);
}

ClinicalGoalTable load_goals(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open goals table: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return goals_from_json(ss.str());
}

}  // namespace spotopt
