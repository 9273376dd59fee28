#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "modnet/data/biased.hpp"
#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"
#include "modnet/linear/theory.hpp"
#include "modnet/mask/mask.hpp"
#include "modnet/nn/checkpoint.hpp"

namespace py = pybind11;
using namespace modnet;

namespace {

// JSON crosses the boundary as text; the Python side wraps these with json.loads/dumps.
std::string verify_proposition_json(double c, std::size_t D, std::size_t n, double delta, std::size_t trials,
                                    std::uint64_t seed, std::size_t mc_samples, const std::string& ties) {
  linear::VerifyOptions vo;
  vo.mc_samples = mc_samples;
  if (ties == "half") {
    vo.ties = linear::TieRule::half;
  } else if (ties != "error") {
    throw ConfigError("ties must be 'error' or 'half'");
  }
  const auto r = linear::verify_proposition(c, D, n, delta, trials, seed, vo);
  io::json trials_j = io::json::array();
  for (const auto& t : r.trials)
    trials_j.push_back({{"sparse_err_seen", t.sparse_err_seen},
                        {"sparse_err_unseen", t.sparse_err_unseen},
                        {"regular_err_seen", t.regular_err_seen},
                        {"sparse_margin", t.sparse_margin},
                        {"regular_margin", t.regular_margin}});
  return io::json{{"c", r.c},
                  {"D", r.D},
                  {"n", r.n},
                  {"p_seen", r.p_seen},
                  {"hoeffding_bound", r.hoeffding_bound},
                  {"seen_tolerance", r.seen_tolerance},
                  {"regular_unseen_err", r.regular_unseen_err},
                  {"margin_win_fraction", r.margin_win_fraction},
                  {"sparse_zero_error", r.sparse_zero_error},
                  {"seen_within_bound", r.seen_within_bound},
                  {"unseen_near_half", r.unseen_near_half},
                  {"margin_holds", r.margin_holds},
                  {"all_pass", r.all_pass()},
                  {"trials", trials_j}}
      .dump();
}

exp::RunOptions options(const std::string& out, const std::string& data_dir, bool force) {
  exp::RunOptions o;
  o.out_root = out;
  o.assets = data_dir.empty() ? exp::Assets::from_environment() : exp::Assets{data_dir};
  o.force = force;
  return o;
}

std::vector<exp::ExperimentReport> reports_from(const std::string& out_root) { return exp::collect_reports(out_root); }

py::array_t<float> to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

py::array_t<std::uint8_t> to_array(const Tensor<std::uint8_t>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<std::uint8_t> a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Modular risk minimization toolkit";

  // translators run newest first, so the base class goes in before its subclasses
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ProvenanceError>(m, "ProvenanceError", PyExc_RuntimeError);

  m.def("_verify_proposition", &verify_proposition_json, py::arg("c"), py::arg("D"), py::arg("n"), py::arg("delta"),
        py::arg("trials"), py::arg("seed") = 0, py::arg("mc_samples") = 100000, py::arg("ties") = "error",
        py::call_guard<py::gil_scoped_release>());

  m.def("_write_linear_csv",
        [](double c, std::size_t D, std::size_t n, double delta, std::size_t trials, std::uint64_t seed,
           const std::string& path) {
          linear::write_proposition_csv({linear::verify_proposition(c, D, n, delta, trials, seed)}, path);
        },
        py::call_guard<py::gil_scoped_release>());

  m.def("_config_defaults", [](const std::string& preset, const std::string& method) {
    return exp::ExperimentConfig::defaults(exp::preset_from_string(preset), exp::method_from_string(method))
        .to_json()
        .dump();
  });
  m.def("_config_normalize",
        [](const std::string& text) { return exp::ExperimentConfig::from_json(io::json::parse(text)).to_json().dump(); });
  m.def("_config_hash",
        [](const std::string& text) { return exp::ExperimentConfig::from_json(io::json::parse(text)).hash(); });

  m.def("_run_experiment",
        [](const std::string& text, const std::string& out, const std::string& data_dir, bool force) {
          const auto cfg = exp::ExperimentConfig::from_json(io::json::parse(text));
          py::gil_scoped_release release;
          return exp::run_experiment(cfg, options(out, data_dir, force)).to_json().dump();
        });

  m.def("_collect_reports", [](const std::string& out) {
    io::json all = io::json::array();
    for (const auto& r : reports_from(out)) all.push_back(r.to_json());
    return all.dump();
  });

  m.def("render_table",
        [](const std::string& out, const std::string& format) {
          if (format != "csv" && format != "markdown") throw ConfigError("format must be csv or markdown");
          return exp::render_table(reports_from(out),
                                   format == "csv" ? exp::TableFormat::csv : exp::TableFormat::markdown);
        },
        py::arg("out"), py::arg("format") = "markdown", "Results table of the completed runs under `out`.");

  m.def("_parse_table_csv", [](const std::string& text) {
    io::json rows = io::json::array();
    for (const auto& r : exp::parse_table_csv(text))
      rows.push_back({{"method", r.method},
                      {"train_mean", r.train.mean},
                      {"train_std", r.train.std},
                      {"test_mean", r.test.mean},
                      {"test_std", r.test.std}});
    return rows.dump();
  });

  m.def("load_mask",
        [](const std::string& dir) {
          const auto imp = mask::import_mask(dir);
          py::dict out;
          if (imp.logits) {
            for (std::size_t l = 0; l < imp.logits->names.size(); ++l)
              out[py::str(imp.logits->names[l])] = to_array(imp.logits->layers[l]);
          } else {
            for (std::size_t l = 0; l < imp.binary->names.size(); ++l)
              out[py::str(imp.binary->names[l])] = to_array(imp.binary->layers[l]);
          }
          return py::make_tuple(imp.kind, out);
        },
        py::arg("dir"), "(kind, {layer: array}) for an exported binary mask or logits directory.");

  m.def("load_checkpoint",
        [](const std::string& dir) {
          const auto ck = nn::load_checkpoint<float>(dir);
          py::dict out;
          for (const auto& e : ck.params.entries()) out[py::str(e.name)] = to_array(e.value);
          return py::make_tuple(ck.seed, out);
        },
        py::arg("dir"), "(seed, {tensor name: array}) from a checkpoint directory.");

  m.def("load_datasets",
        [](const std::string& dir) {
          const auto loaded = data::load_datasets(dir);
          py::list envs;
          for (const auto& e : loaded.envs) {
            py::array_t<float> images({static_cast<py::ssize_t>(e.size()), static_cast<py::ssize_t>(e.channels),
                                       static_cast<py::ssize_t>(e.height), static_cast<py::ssize_t>(e.width)});
            std::copy(e.images.begin(), e.images.end(), images.mutable_data());
            py::dict d;
            d["env_id"] = e.env_id;
            d["provenance"] = data::to_string(e.provenance);
            d["bias_coefficient"] = e.bias_coefficient;
            d["images"] = images;
            d["class_labels"] = py::array_t<int>(e.class_labels.size(), e.class_labels.data());
            d["color_labels"] = py::array_t<int>(e.color_labels.size(), e.color_labels.data());
            envs.append(d);
          }
          return envs;
        },
        py::arg("dir"), "Environments saved by generate-data.");
}
