#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fact/eval_harness.hpp"

namespace py = pybind11;
using namespace fact;

namespace {

TrainConfig resolve(const std::optional<std::string>& config_file, const std::vector<std::string>& overrides) {
    TrainConfig c = config_file ? load_config_file(*config_file) : TrainConfig{};
    for (const auto& kv : overrides) apply_override(c, kv);
    c.validate();
    return c;
}

template <typename T>
py::dict train_with(const TrainConfig& c, const std::optional<std::filesystem::path>& out) {
    Trainer<T> trainer(c, dataset_for(c));
    RunOptions o;
    if (out) {
        o.out = *out;
    } else {
        o.write_checkpoints = false;
    }
    RunResult r;
    {
        py::gil_scoped_release release;
        r = run_training(trainer, o);
    }
    py::dict d;
    d["final_step"] = r.final_step;
    d["eval_loss_initial"] = r.eval_loss_initial;
    d["eval_loss_final"] = r.eval_loss_final;
    d["loss_curve"] = r.loss_curve;
    d["digest"] = hex64(r.digest);
    d["final_checkpoint"] = r.final_checkpoint ? py::cast(r.final_checkpoint->string()) : py::none();
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Face adapter training core";

    py::register_exception<InvalidConfig>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<LoadError>(m, "LoadError", PyExc_IOError);
    py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);

    m.def("config_keys", &config_keys);
    m.def("suggest_key", &suggest_key);
    m.def(
        "config_json",
        [](std::optional<std::string> file, std::vector<std::string> overrides) {
            return to_json(resolve(file, overrides)).dump();
        },
        py::arg("config_file") = py::none(), py::arg("overrides") = std::vector<std::string>{});
    m.def(
        "config_hash",
        [](std::optional<std::string> file, std::vector<std::string> overrides) {
            return config_hash(resolve(file, overrides));
        },
        py::arg("config_file") = py::none(), py::arg("overrides") = std::vector<std::string>{});

    m.def(
        "train",
        [](std::optional<std::string> file, std::vector<std::string> overrides,
           std::optional<std::filesystem::path> out) {
            const auto c = resolve(file, overrides);
            return c.precision == 64 ? train_with<double>(c, out) : train_with<float>(c, out);
        },
        py::arg("config_file") = py::none(), py::arg("overrides") = std::vector<std::string>{},
        py::arg("out") = py::none());

    m.def(
        "make_dataset",
        [](const std::filesystem::path& out, std::optional<std::string> file, std::vector<std::string> overrides) {
            const auto c = resolve(file, overrides);
            const auto ds = generate_synthetic_identity_dataset(c.dataset);
            save_dataset(ds, out);
            return ds.size();
        },
        py::arg("out"), py::arg("config_file") = py::none(), py::arg("overrides") = std::vector<std::string>{});

    m.def("load_checkpoint", [](const std::filesystem::path& dir) {
        const auto data = load_checkpoint(dir);
        py::dict tensors;
        for (const auto& [name, value] : data.tensors) tensors[py::str(name)] = value;
        return py::make_tuple(data.manifest.step, data.manifest.config_hash, tensors);
    });

    m.def(
        "fair_loss",
        [](const Matrix<double>& increment, const Matrix<double>& tokens, const MaskGrid& mask) {
            return fair_loss(increment, tokens, mask);
        },
        py::arg("increment"), py::arg("tokens"), py::arg("mask"));
    m.def("cfg_combine", &cfg_combine<double>, py::arg("cond"), py::arg("uncond"), py::arg("scale"));
    m.def(
        "shuffle_prob",
        [](int step, double start, double end, int total_steps) {
            CurriculumSchedule s;
            s.shuffle_start = start;
            s.shuffle_end = end;
            s.total_steps = total_steps;
            s.validate();
            return schedule_shuffle_prob(step, s);
        },
        py::arg("step"), py::arg("start") = 0.2, py::arg("end") = 0.6, py::arg("total_steps") = 2000);
    m.def("cosine_similarity", &cosine_similarity);
}
