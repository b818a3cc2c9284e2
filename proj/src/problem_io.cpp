#include "spotopt/problem_io.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

// On-disk arrays are little-endian and read/written verbatim.
static_assert(std::endian::native == std::endian::little);

namespace spotopt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

template <class T>
void write_array(const std::vector<T>& v, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

template <class T>
std::vector<T> read_array(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto bytes = static_cast<std::uint64_t>(in.tellg());
  if (bytes % sizeof(T) != 0)
    throw std::runtime_error("file size not a multiple of element size: " + path.string());
  std::vector<T> v(bytes / sizeof(T));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("short read from " + path.string());
  return v;
}

const char* kind_name(StructureKind k) {
  switch (k) {
    case StructureKind::target: return "target";
    case StructureKind::oar: return "oar";
    case StructureKind::auxiliary: return "auxiliary";
  }
  return "oar";
}

StructureKind kind_from_name(const std::string& s) {
  if (s == "target") return StructureKind::target;
  if (s == "oar") return StructureKind::oar;
  if (s == "auxiliary") return StructureKind::auxiliary;
  throw std::runtime_error("unknown structure kind: " + s);
}

}  // namespace

void save_problem(const PlanProblem& p, const std::string& dir) {
  p.validate();
  fs::create_directories(dir);
  const fs::path root(dir);

  json header;
  header["version"] = kPlanProblemVersion;
  header["n_voxels"] = p.matrix.rows;
  header["n_spots"] = p.matrix.cols;
  header["nnz"] = p.matrix.nnz();
  header["fractions"] = p.fractions;
  header["mu_bounds_per_fraction"] = {kMuMinPerFraction, kMuMaxPerFraction};
  if (p.grid_dims[0] > 0) {
    header["grid_dims"] = p.grid_dims;
    header["voxel_spacing_mm"] = p.voxel_spacing_mm;
  }
  header["structures"] = json::array();
  for (const auto& s : p.structures) {
    json js;
    js["name"] = s.name;
    js["kind"] = kind_name(s.kind);
    js["voxel_ids"] = s.voxel_ids;
    header["structures"].push_back(std::move(js));
  }
  header["objectives"] = json::array();
  for (const auto& o : p.objectives) {
    json jo;
    jo["structure"] = p.structures[static_cast<std::size_t>(o.structure_index)].name;
    jo["kind"] = to_string(o.kind);
    jo["weight"] = o.weight;
    jo["dose_limit"] = o.dose_limit;
    header["objectives"].push_back(std::move(jo));
  }
  header["prescriptions"] = json::object();
  for (const auto& [name, rx] : p.prescriptions) header["prescriptions"][name] = rx;

  std::ofstream out(root / "problem.json");
  if (!out) throw std::runtime_error("cannot write problem.json in " + dir);
  out << header.dump(2) << "\n";
  if (!out) throw std::runtime_error("short write to problem.json in " + dir);

  write_array(p.matrix.row_offsets, root / "row_offsets.u64");
  write_array(p.matrix.col_idx, root / "col_indices.u32");
  write_array(p.matrix.values, root / "values.f64");
}

PlanProblem load_problem(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "problem.json");
  if (!in) throw std::runtime_error("cannot open problem.json in " + dir);
  json header = json::parse(in);

  if (header.at("version").get<std::string>() != kPlanProblemVersion)
    throw std::runtime_error("unsupported problem container version in " + dir);

  PlanProblem p;
  p.matrix.rows = header.at("n_voxels").get<std::int64_t>();
  p.matrix.cols = header.at("n_spots").get<std::int64_t>();
  p.fractions = header.at("fractions").get<std::int64_t>();
  if (header.contains("grid_dims")) {
    auto d = header["grid_dims"].get<std::vector<std::int64_t>>();
    if (d.size() == 3) p.grid_dims = {d[0], d[1], d[2]};
    p.voxel_spacing_mm = header.value("voxel_spacing_mm", 0.0);
  }
  for (const auto& js : header.at("structures")) {
    Structure s;
    s.name = js.at("name").get<std::string>();
    s.kind = kind_from_name(js.at("kind").get<std::string>());
    s.voxel_ids = js.at("voxel_ids").get<std::vector<std::int64_t>>();
    p.structures.push_back(std::move(s));
  }
  for (const auto& jo : header.at("objectives")) {
    ObjectiveComponent o;
    o.structure_index = p.structure_index(jo.at("structure").get<std::string>());
    if (o.structure_index < 0)
      throw std::runtime_error("objective references unknown structure in " + dir);
    o.kind = objective_kind_from_string(jo.at("kind").get<std::string>());
    o.weight = jo.at("weight").get<double>();
    o.dose_limit = jo.at("dose_limit").get<double>();
    p.objectives.push_back(o);
  }
  if (header.contains("prescriptions"))
    for (const auto& [name, rx] : header["prescriptions"].items())
      p.prescriptions[name] = rx.get<double>();

  p.matrix.row_offsets = read_array<std::uint64_t>(root / "row_offsets.u64");
  p.matrix.col_idx = read_array<std::uint32_t>(root / "col_indices.u32");
  p.matrix.values = read_array<double>(root / "values.f64");

  const auto nnz = header.at("nnz").get<std::int64_t>();
  if (p.matrix.nnz() != nnz)
    throw std::runtime_error("nnz mismatch between header and arrays in " + dir);
  p.validate();
  return p;
}

void save_f64(const std::vector<double>& x, const std::string& path) {
  write_array(x, fs::path(path));
}

std::vector<double> load_f64(const std::string& path) {
  return read_array<double>(fs::path(path));
}

}  // namespace spotopt
