#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "toast/channel.hpp"
#include "toast/edm.hpp"
#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/heads.hpp"
#include "toast/lora.hpp"
#include "toast/random.hpp"
#include "toast/report.hpp"
#include "toast/rl.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace toast;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

py::array_t<float> to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * static_cast<std::size_t>(c.numel()));
  return out;
}

py::dict record_dict(const heads::MetricsRecord& r) {
  py::dict d;
  d["channel"] = r.channel;
  d["snr_db"] = r.snr_db;
  d["psnr"] = r.psnr;
  d["ssim"] = r.ssim;
  d["accuracy"] = r.accuracy;
  d["f1_macro"] = r.f1_macro;
  d["loss_recon"] = r.loss_recon;
  d["loss_cls"] = r.loss_cls;
  d["lambda_recon"] = r.lambda_recon;
  d["epoch"] = r.epoch;
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

data::Splits load_splits(harness::ExperimentConfig& cfg, const std::optional<fs::path>& root) {
  if (root) cfg.dataset.root = *root;
  return data::load_dataset(cfg.dataset);
}

class Model {
 public:
  explicit Model(const fs::path& ckpt) : bundle_(harness::load_model(ckpt)) {}

  std::vector<py::dict> evaluate(const std::vector<std::string>& channels, const std::vector<double>& snrs,
                                 const std::optional<fs::path>& data_root) {
    auto cfg = bundle_.config;
    auto req = harness::eval_request(cfg);
    if (!channels.empty()) {
      req.channels.clear();
      for (const auto& c : channels) req.channels.push_back(channel::parse_channel_kind(c));
    }
    if (!snrs.empty()) req.snrs = snrs;
    req.lambda_recon = bundle_.final_lambda;
    req.epoch = bundle_.epoch;
    std::vector<heads::MetricsRecord> rows;
    {
      py::gil_scoped_release release;
      auto splits = load_splits(cfg, data_root);
      rows = harness::evaluate(*bundle_.model, splits.test, req);
    }
    std::vector<py::dict> out;
    for (const auto& r : rows) out.push_back(record_dict(r));
    return out;
  }

  py::tuple transmit(const FloatArray& images, const std::string& kind, double snr_db, std::uint64_t seed,
                     bool use_edm) {
    auto x = to_tensor(images);
    auto ch = bundle_.config.channel.params;
    ch.kind = channel::parse_channel_kind(kind);
    ch.snr_db = snr_db;
    torch::NoGradGuard ng;
    bundle_.model->eval();
    auto gen = make_generator(seed);
    auto out = harness::run_pipeline(*bundle_.model, x, {ch, false, use_edm, bundle_.config.denoiser.eval}, gen);
    return py::make_tuple(to_numpy(out.x_hat), to_numpy(out.logits));
  }

  std::uint64_t fingerprint() const { return bundle_.model->fingerprint(); }
  std::int64_t epoch() const { return bundle_.epoch; }
  double final_lambda() const { return bundle_.final_lambda; }
  py::object config() const { return json_to_py(nlohmann::json(bundle_.config)); }

 private:
  harness::ModelBundle bundle_;
};

}  // namespace

PYBIND11_MODULE(_pytoast, m) {
  m.doc() = "Python bindings for the toast semantic communication library";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  // channels
  m.def("channel_kinds", [] {
    std::vector<std::string> k;
    for (auto c : {channel::ChannelKind::awgn, channel::ChannelKind::rayleigh, channel::ChannelKind::rician,
                   channel::ChannelKind::phase_noise, channel::ChannelKind::impulse}) {
      k.emplace_back(channel::to_string(c));
    }
    return k;
  });
  m.def("snr_to_sigma", &channel::snr_to_sigma, py::arg("snr_db"));
  m.def("normalize_power", [](const FloatArray& z) { return to_numpy(channel::normalize_power(to_tensor(z))); },
        py::arg("z"));
  m.def(
      "apply_channel",
      [](const FloatArray& z, const std::string& kind, double snr_db, std::uint64_t seed, bool coherent,
         double rician_k, double impulse_prob, double phase_sigma) {
        channel::ChannelConfig cfg;
        cfg.kind = channel::parse_channel_kind(kind);
        cfg.snr_db = snr_db;
        cfg.coherent = coherent;
        cfg.rician_k = rician_k;
        cfg.impulse_prob = impulse_prob;
        cfg.phase_sigma = phase_sigma;
        cfg.validate();
        auto gen = make_generator(seed);
        auto out = channel::apply_channel(to_tensor(z), cfg, gen);
        py::dict info;
        info["sigma_n"] = out.realization.sigma_n;
        info["noise"] = to_numpy(out.realization.n);
        if (out.realization.impulse_mask.defined()) {
          info["impulse_rate"] = out.realization.impulse_mask.to(torch::kFloat64).mean().item<double>();
        }
        if (out.realization.h.is_complex()) {
          info["gain_power"] = out.realization.h.abs().pow(2).mean().item<double>();
        }
        return py::make_tuple(to_numpy(out.received), info);
      },
      py::arg("z"), py::arg("kind") = "awgn", py::arg("snr_db") = 10.0, py::arg("seed") = 0,
      py::arg("coherent") = true, py::arg("rician_k") = 2.0, py::arg("impulse_prob") = 0.01,
      py::arg("phase_sigma") = 0.1);

  // metrics
  m.def("psnr", [](const FloatArray& x, const FloatArray& y) { return heads::psnr(to_tensor(x), to_tensor(y)); });
  m.def("ssim", [](const FloatArray& x, const FloatArray& y) { return heads::ssim(to_tensor(x), to_tensor(y)); });
  m.def("accuracy", &heads::accuracy, py::arg("labels"), py::arg("preds"));
  m.def("f1_macro", &heads::f1_macro, py::arg("labels"), py::arg("preds"));

  // diffusion
  m.def("sigma_grid", &edm::sigma_grid, py::arg("sigma_max"), py::arg("steps"), py::arg("sigma_min") = 0.002);
  m.def(
      "precondition",
      [](double sigma, double sigma_data) {
        auto p = edm::precondition(sigma, sigma_data);
        py::dict d;
        d["c_in"] = p.c_in;
        d["c_noise"] = p.c_noise;
        d["c_skip"] = p.c_skip;
        d["c_out"] = p.c_out;
        return d;
      },
      py::arg("sigma"), py::arg("sigma_data") = edm::kSigmaData);

  // scheduler
  m.def("epsilon_at", &rl::epsilon_at, py::arg("step"));
  m.def("lambda_entropy", &rl::lambda_entropy, py::arg("lambdas"), py::arg("bins") = 10);
  m.def(
      "compute_reward",
      [](double prev_loss, double new_loss, double prev_acc, double new_acc, const std::vector<double>& lambdas) {
        auto r = rl::compute_reward(prev_loss, new_loss, prev_acc, new_acc, lambdas);
        py::dict d;
        d["loss_gain"] = r.loss_gain;
        d["acc_gain"] = r.acc_gain;
        d["significant"] = r.significant;
        d["entropy"] = r.entropy;
        d["total"] = r.total;
        return d;
      },
      py::arg("prev_loss"), py::arg("new_loss"), py::arg("prev_acc"), py::arg("new_acc"),
      py::arg("recent_lambdas") = std::vector<double>{});

  // adapters
  m.def(
      "param_report",
      [](const std::vector<std::tuple<std::string, double, double>>& rows, std::optional<double> total_original,
         std::optional<double> total_adapter) {
        std::vector<lora::RoleParamRow> rr;
        for (const auto& [name, orig, ad] : rows) rr.push_back({name, orig, ad});
        auto rep = total_original && total_adapter ? lora::param_report(rr, *total_original, *total_adapter)
                                                   : lora::param_report(rr);
        py::dict d;
        d["total_original"] = rep.total_original;
        d["total_adapter"] = rep.total_adapter;
        d["percent"] = rep.percent();
        d["reduction"] = rep.reduction();
        d["table"] = rep.to_table();
        return d;
      },
      py::arg("rows"), py::arg("total_original") = py::none(), py::arg("total_adapter") = py::none());

  // configuration
  m.def(
      "load_config", [](const fs::path& p) { return json_to_py(nlohmann::json(harness::load_config(p))); },
      py::arg("path"));
  m.def(
      "validate_config",
      [](const py::object& cfg) {
        auto c = py_to_json(cfg).get<harness::ExperimentConfig>();
        c.resolve();
        c.validate();
        return json_to_py(nlohmann::json(c));
      },
      py::arg("config"));
  m.def(
      "cosine_lr",
      [](double start, double end, std::int64_t epochs, std::int64_t epoch) {
        harness::OptimizerSettings s;
        s.lr_start = start;
        s.lr_end = end;
        s.epochs = epochs;
        return harness::cosine_lr(s, epoch);
      },
      py::arg("lr_start"), py::arg("lr_end"), py::arg("epochs"), py::arg("epoch"));

  // harness
  m.def(
      "train",
      [](const py::object& config, const std::optional<fs::path>& out, std::optional<std::int64_t> epochs,
         const std::optional<fs::path>& data_root) {
        auto cfg = py::isinstance<py::dict>(config) ? py_to_json(config).get<harness::ExperimentConfig>()
                                                    : harness::load_config(config.cast<fs::path>());
        if (out) cfg.output_dir = *out;
        if (epochs) cfg.optim.epochs = *epochs;
        cfg.resolve();
        cfg.validate();
        std::vector<harness::EpochSummary> sums;
        {
          py::gil_scoped_release release;
          auto splits = load_splits(cfg, data_root);
          harness::Trainer trainer(cfg, std::move(splits));
          sums = trainer.run();
        }
        std::vector<py::dict> res;
        for (const auto& s : sums) {
          py::dict d;
          d["epoch"] = s.epoch;
          d["lr"] = s.lr;
          d["loss"] = s.loss;
          d["loss_recon"] = s.loss_recon;
          d["loss_cls"] = s.loss_cls;
          d["max_grad_norm_clipped"] = s.max_grad_norm_clipped;
          d["validation"] = record_dict(s.validation);
          res.push_back(d);
        }
        return res;
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("epochs") = py::none(),
      py::arg("data_root") = py::none());

  m.def(
      "adapt",
      [](const fs::path& ckpt, const std::string& kind, double fraction, std::int64_t max_epochs,
         const std::optional<fs::path>& library, const std::optional<fs::path>& data_root) {
        auto bundle = harness::load_model(ckpt);
        harness::AdaptRequest req;
        req.kind = channel::parse_channel_kind(kind);
        req.fraction = fraction;
        req.max_epochs = max_epochs;
        req.seed = bundle.config.seed;
        if (library) req.library = *library;
        harness::AdaptResult res;
        {
          py::gil_scoped_release release;
          auto splits = load_splits(bundle.config, data_root);
          res = harness::adapt_to_channel(*bundle.model, bundle.config, splits, req);
        }
        py::dict d;
        d["epochs_run"] = res.epochs_run;
        d["train_loss"] = res.train_loss;
        d["val_loss"] = res.val_loss;
        d["trainable_params"] = res.trainable_params;
        d["total_params"] = res.total_params;
        d["trainable_fraction"] = res.trainable_fraction();
        d["base_unchanged"] = res.base_fingerprint_before == res.base_fingerprint_after;
        d["saved_to"] = res.saved_to.string();
        return d;
      },
      py::arg("ckpt"), py::arg("channel") = "rayleigh", py::arg("fraction") = 0.01, py::arg("max_epochs") = 5,
      py::arg("library") = py::none(), py::arg("data_root") = py::none());

  m.def(
      "report",
      [](const std::vector<fs::path>& csvs, const fs::path& out, const std::vector<fs::path>& logs) {
        auto res = report::make_report(csvs, out, logs);
        py::dict d;
        std::vector<std::string> files;
        for (const auto& f : res.files) files.push_back(f.string());
        d["files"] = files;
        d["table"] = res.table;
        d["rows"] = res.summary.size();
        return d;
      },
      py::arg("csvs"), py::arg("out"), py::arg("trajectory") = std::vector<fs::path>{});

  py::class_<Model>(m, "Model")
      .def(py::init<const fs::path&>(), py::arg("checkpoint"))
      .def("evaluate", &Model::evaluate, py::arg("channels") = std::vector<std::string>{},
           py::arg("snrs") = std::vector<double>{}, py::arg("data_root") = py::none())
      .def("transmit", &Model::transmit, py::arg("images"), py::arg("channel") = "awgn", py::arg("snr_db") = 10.0,
           py::arg("seed") = 0, py::arg("use_edm") = true)
      .def_property_readonly("fingerprint", &Model::fingerprint)
      .def_property_readonly("epoch", &Model::epoch)
      .def_property_readonly("final_lambda", &Model::final_lambda)
      .def_property_readonly("config", &Model::config);
}
