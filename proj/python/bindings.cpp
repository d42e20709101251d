// Python bindings. Arrays cross the boundary as float64 / int32 numpy copies.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "modfuse/config.hpp"
#include "modfuse/error.hpp"
#include "modfuse/losses.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/model.hpp"
#include "modfuse/nifti.hpp"
#include "modfuse/optim.hpp"
#include "modfuse/parallel.hpp"
#include "modfuse/pipeline.hpp"
#include "modfuse/synth.hpp"

namespace py = pybind11;
using namespace modfuse;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a)
{
    Shape s(a.shape(), a.shape() + a.ndim());
    return Tensor(s, std::vector<double>(a.data(), a.data() + a.size()));
}

F64 to_array(const Tensor& t)
{
    F64 a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

LabelGrid to_grid(const I32& a)
{
    if (a.ndim() != 3) throw Error(ErrorCode::ShapeMismatch, "label array must be 3-D");
    return LabelGrid({std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::size_t(a.shape(2))},
                     std::vector<std::int32_t>(a.data(), a.data() + a.size()));
}

I32 grid_to_array(const LabelGrid& g)
{
    I32 a({py::ssize_t(g.shape[0]), py::ssize_t(g.shape[1]), py::ssize_t(g.shape[2])});
    std::copy(g.labels.begin(), g.labels.end(), a.mutable_data());
    return a;
}

py::dict metrics_dict(const MetricValues& m)
{
    py::dict d;
    for (std::size_t i = 0; i < 5; ++i) d[metric_names[i]] = metric_at(m, i);
    return d;
}

py::tuple loss_tuple(const LossResult& r) { return py::make_tuple(r.value, to_array(r.grad)); }

// Overrides are "section.key" -> value, applied on top of the defaults.
Config make_config(const std::map<std::string, std::string>& overrides)
{
    std::string text;
    for (const auto& [k, v] : overrides) text += k + " = " + v + "\n";
    return load_config(text);
}

Volume to_volume(const std::vector<F64>& modalities)
{
    Volume v;
    for (const auto& m : modalities) v.modalities.push_back(to_tensor(m));
    return v;
}

}  // namespace

PYBIND11_MODULE(_modfuse, m)
{
    m.doc() = "Multi-encoder 3-D segmentation toolkit";

    static py::exception<Error> error_type(m, "ModfuseError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object err = py::handle(error_type.ptr())(e.what());
            err.attr("code") = to_string(e.code());
            PyErr_SetObject(error_type.ptr(), err.ptr());
        }
    });

    m.def("set_num_threads", &set_num_threads, py::arg("n"));
    m.def("num_threads", &num_threads);

    // metrics
    m.def(
        "confusion",
        [](const I32& pred, const I32& gt) {
            const auto c = confusion(to_grid(pred), to_grid(gt));
            return py::dict(py::arg("tp") = c.tp, py::arg("tn") = c.tn, py::arg("fp") = c.fp, py::arg("fn") = c.fn);
        },
        py::arg("pred"), py::arg("gt"));
    m.def(
        "binary_metrics",
        [](const I32& pred, const I32& gt) {
            return metrics_dict(MetricValues::from_counts(confusion(to_grid(pred), to_grid(gt))));
        },
        py::arg("pred"), py::arg("gt"), "dsc, acc, se, sp, pre of the nonzero voxels");
    m.def(
        "evaluate_regions",
        [](const I32& pred, const I32& gt, const std::string& regions) {
            const auto rs = parse_regions(regions);
            const auto cm = evaluate_case(to_grid(pred), to_grid(gt), rs);
            py::dict d;
            for (std::size_t i = 0; i < rs.size(); ++i) d[py::str(rs[i].name)] = metrics_dict(cm.regions[i]);
            return d;
        },
        py::arg("pred"), py::arg("gt"), py::arg("regions") = "whole:1,2;core:2");

    // schedules
    m.def(
        "poly_lr",
        [](double t, double eta0, std::size_t total, double power) {
            ScheduleSpec s;
            s.eta0 = eta0;
            s.total_epochs = total;
            s.power = power;
            return poly_lr(t, s);
        },
        py::arg("t"), py::arg("eta0"), py::arg("total_epochs"), py::arg("power") = 0.9);

    // losses: each returns (value, gradient)
    m.def("softmax", [](const F64& x) { return to_array(softmax_channels_forward(to_tensor(x))); }, py::arg("logits"));
    m.def("dice_loss", [](const F64& p, const F64& t) { return loss_tuple(dice_loss(to_tensor(p), to_tensor(t))); },
          py::arg("probs"), py::arg("target"));
    m.def("ce_loss", [](const F64& l, const F64& t) { return loss_tuple(ce_loss(to_tensor(l), to_tensor(t))); },
          py::arg("logits"), py::arg("target"));
    m.def(
        "combined_loss",
        [](const F64& l, const F64& t, double ld, double lc) {
            return loss_tuple(combined_loss(to_tensor(l), to_tensor(t), LossWeights{ld, lc}));
        },
        py::arg("logits"), py::arg("target"), py::arg("lambda_dice") = 1.0, py::arg("lambda_ce") = 1.0);
    m.def("soft_dice_loss",
          [](const F64& p, const F64& t) { return loss_tuple(soft_dice_loss(to_tensor(p), to_tensor(t))); },
          py::arg("probs"), py::arg("target"));

    // NIfTI
    m.def(
        "read_nifti",
        [](const std::filesystem::path& path) {
            const auto img = read_nifti_file(path);
            return py::make_tuple(to_array(img.grid), img.spacing_mm);
        },
        py::arg("path"), "returns (array[D,H,W], spacing in (d,h,w) order)");
    m.def(
        "write_nifti",
        [](const std::filesystem::path& path, const F64& grid, std::array<double, 3> spacing, const std::string& dtype) {
            NiftiDatatype dt = NiftiDatatype::Float32;
            if (dtype == "int16") dt = NiftiDatatype::Int16;
            else if (dtype == "float64") dt = NiftiDatatype::Float64;
            else if (dtype != "float32") throw Error(ErrorCode::UnsupportedDatatype, "dtype '" + dtype + "'");
            write_nifti_file(path, to_tensor(grid), spacing, dt);
        },
        py::arg("path"), py::arg("grid"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
        py::arg("dtype") = "float32");

    // synthetic data
    m.def(
        "generate_case",
        [](std::uint64_t seed, const std::map<std::string, std::string>& overrides) {
            const Volume v = generate_case(make_config(overrides).phantom, seed);
            py::list mods;
            for (const auto& t : v.modalities) mods.append(to_array(t));
            return py::make_tuple(mods, grid_to_array(*v.mask));
        },
        py::arg("seed"), py::arg("config") = std::map<std::string, std::string>{},
        "returns ([modality arrays], label array)");

    // config
    m.def("default_config", [] { return Config{}.to_map(); });
    m.def("load_config", [](const std::string& text) { return load_config(text).to_map(); }, py::arg("text"));
    m.def("config_keys", &key_help);

    // model
    py::class_<Model>(m, "Model")
        .def(py::init([](const std::map<std::string, std::string>& overrides, std::uint64_t seed) {
                 SeededRng rng(seed);
                 return Model(make_config(overrides).model, rng);
             }),
             py::arg("config") = std::map<std::string, std::string>{}, py::arg("seed") = 0)
        .def("num_parameters", &Model::num_parameters)
        .def("param_ids",
             [](const Model& mdl) {
                 std::vector<std::string> ids;
                 for (const auto& p : mdl.params()) ids.push_back(p.id);
                 return ids;
             })
        .def("param", [](const Model& mdl, const std::string& id) { return to_array(mdl.param(id).value); })
        .def(
            "forward",
            [](Model& mdl, const std::vector<F64>& inputs) {
                std::vector<Tensor> ts;
                for (const auto& a : inputs) ts.push_back(to_tensor(a));
                return to_array(mdl.forward(ts));
            },
            py::arg("inputs"), "one [D,H,W] patch per modality; returns logits [J,D,H,W]")
        .def(
            "predict",
            [](Model& mdl, const std::vector<F64>& modalities, std::array<std::size_t, 3> patch, double overlap) {
                PatchSpec ps;
                ps.size = patch;
                return to_array(sliding_window_predict(mdl, zscore_normalize(to_volume(modalities)), ps, overlap));
            },
            py::arg("modalities"), py::arg("patch") = std::array<std::size_t, 3>{16, 16, 16},
            py::arg("overlap") = 0.5, "sliding-window class probabilities [J,D,H,W]");

    // pipeline
    m.def(
        "generate_data",
        [](const std::map<std::string, std::string>& overrides, std::size_t n, const std::filesystem::path& out) {
            cmd_generate_data(make_config(overrides), n, out);
        },
        py::arg("config"), py::arg("n"), py::arg("out_dir"));
    m.def(
        "train",
        [](const std::map<std::string, std::string>& overrides, std::optional<std::filesystem::path> init) {
            TrainOptions opts;
            opts.init = init;
            const Config cfg = make_config(overrides);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = cmd_train(cfg, opts);
            }
            py::dict d;
            d["epoch_loss"] = r.epoch_loss;
            d["val_dsc"] = r.val_dsc;
            d["best_epoch"] = r.best_epoch;
            d["best_dsc"] = r.best_dsc;
            d["best_checkpoint"] = r.best_checkpoint;
            d["last_checkpoint"] = r.last_checkpoint;
            return d;
        },
        py::arg("config"), py::arg("init") = std::nullopt);
    m.def(
        "pretrain",
        [](const std::map<std::string, std::string>& overrides) {
            const Config cfg = make_config(overrides);
            PretrainResult r;
            {
                py::gil_scoped_release release;
                r = cmd_pretrain(cfg);
            }
            py::dict d;
            d["loss"] = r.loss;
            d["inpaint"] = r.inpaint;
            d["rotation"] = r.rotation;
            d["contrastive"] = r.contrastive;
            d["heldout_rotation_acc"] = r.heldout_rotation_acc;
            d["checkpoint"] = r.checkpoint;
            return d;
        },
        py::arg("config"));
    m.def(
        "predict",
        [](const std::map<std::string, std::string>& overrides, const std::filesystem::path& checkpoint,
           const std::filesystem::path& manifest, const std::filesystem::path& out) {
            return cmd_predict(make_config(overrides), checkpoint, manifest, out);
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("manifest"), py::arg("out_dir"));
    m.def(
        "evaluate",
        [](const std::map<std::string, std::string>& overrides, const std::filesystem::path& pred,
           const std::filesystem::path& manifest, const std::filesystem::path& out) {
            return parse_report_kv(format_report_kv(cmd_evaluate(make_config(overrides), pred, manifest, out)));
        },
        py::arg("config"), py::arg("pred_dir"), py::arg("manifest"), py::arg("out_dir"),
        "returns the flat 'case.region.metric' map");
}
