#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tapir/cli.hpp"
#include "tapir/errors.hpp"
#include "tapir/evaluation.hpp"
#include "tapir/synthetic.hpp"
#include "tapir/training.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

tapir::BoundingBox box_of(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

tapir::DatasetIndex index_of(const std::string& doc) {
  auto parsed = tapir::parse_dataset(json::parse(doc));
  return std::move(parsed.index);
}

}  // namespace

// Structured values cross the boundary as JSON text; the package's
// __init__.py turns them into dicts and lists.
PYBIND11_MODULE(_core, m) {
  m.doc() = "Synthetic surgical video pipeline: data generation, metrics and the command line.";

  py::register_exception<tapir::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<tapir::NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
    return tapir::iou(box_of(a), box_of(b));
  }, py::arg("a"), py::arg("b"));

  m.def("average_precision", &tapir::average_precision, py::arg("scores"), py::arg("relevant"),
        py::arg("total_positives") = -1);

  m.def("lr_at", [](double progress, double base_lr, int epochs, int warmup_epochs) {
    tapir::OptimConfig c;
    c.base_lr = base_lr;
    c.epochs = epochs;
    c.warmup_epochs = warmup_epochs;
    c.validate();
    return tapir::lr_at(progress, c);
  }, py::arg("progress"), py::arg("base_lr") = 0.0125, py::arg("epochs") = 30, py::arg("warmup_epochs") = 5);

  m.def("_build_index", [](const std::string& generator) {
    return tapir::to_json(tapir::build_dataset_index(tapir::generator_config_from_json(json::parse(generator)))).dump();
  });

  m.def("_validate", [](const std::string& doc) {
    auto parsed = tapir::parse_dataset(json::parse(doc));
    auto report = parsed.malformed;
    const auto more = tapir::validate_dataset(parsed.index);
    report.insert(report.end(), more.begin(), more.end());
    json out = json::array();
    for (const auto& v : report)
      out.push_back({{"video_id", v.video_id}, {"frame_index", v.frame_index}, {"rule", v.rule}, {"detail", v.detail}});
    return out.dump();
  });

  m.def("_render_frame", [](const std::string& generator, int video, int64_t frame) {
    const auto cfg = tapir::generator_config_from_json(json::parse(generator));
    if (video < 0 || video >= cfg.n_videos) throw py::index_error("video index out of range");
    const auto script = tapir::script_procedure(cfg, tapir::video_seed(cfg.seed, video));
    if (frame < 0 || frame >= cfg.frames_per_video) throw py::index_error("frame index out of range");
    const tapir::Image img = tapir::render_frame(script, frame);
    py::array_t<uint8_t> out({img.height, img.width, 3});
    std::copy(img.rgb.begin(), img.rgb.end(), out.mutable_data());
    return out;
  });

  m.def("_frame_map", [](const std::string& preds, const std::string& dataset, const std::string& task) {
    return tapir::to_json(tapir::frame_map(tapir::frame_predictions_from_json(json::parse(preds)),
                                           index_of(dataset).keyframes, task)).dump();
  });

  m.def("_detection_map", [](const std::string& preds, const std::string& dataset, const std::string& mode,
                             double iou_threshold) {
    if (mode != "instrument" && mode != "action") throw py::value_error("mode must be instrument or action");
    return tapir::to_json(tapir::detection_map(tapir::detection_predictions_from_json(json::parse(preds)),
                                               index_of(dataset).keyframes,
                                               mode == "action" ? tapir::LabelMode::kAction : tapir::LabelMode::kInstrument,
                                               iou_threshold)).dump();
  });

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int rc = 0;
    {
      py::gil_scoped_release release;
      rc = tapir::run_cli(args, out, err);
    }
    return py::make_tuple(rc, out.str(), err.str());
  }, py::arg("args"), "Runs a tapir command; returns (exit code, stdout, stderr).");
}
