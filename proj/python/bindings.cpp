// Python module _cmmcot. JSON-shaped values cross the boundary as strings;
// the cmmcot package decodes them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/datagen.hpp"
#include "cmmcot/decoder.hpp"
#include "cmmcot/engine.hpp"
#include "cmmcot/grammar.hpp"
#include "cmmcot/harness.hpp"
#include "cmmcot/image.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace cmmcot;

namespace {

const Vocabulary& vocab() { return Vocabulary::standard(); }

Image image_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != kChannels) throw std::invalid_argument("image must be an HxWx3 array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.data().begin());
  return img;
}

py::array_t<float> image_to_array(const Image& img) {
  py::array_t<float> a({img.height(), img.width(), kChannels});
  std::copy(img.data().begin(), img.data().end(), a.mutable_data());
  return a;
}

std::vector<Image> images_from(const py::list& items) {
  std::vector<Image> out;
  for (const auto& item : items) {
    if (py::isinstance<py::str>(item)) out.push_back(read_png(item.cast<std::string>()));
    else out.push_back(image_from_array(item.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>()));
  }
  return out;
}

struct Model {
  Weights<float> weights;
};

std::vector<int> all_layers(int n) {
  std::vector<int> out;
  for (int l = 0; l < n; ++l) out.push_back(l);
  return out;
}

}  // namespace

PYBIND11_MODULE(_cmmcot, m) {
  m.doc() = "Interleaved grounded chain-of-thought core";

  static py::exception<GrammarError> grammar_error(m, "GrammarError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const GrammarError& e) {
      py::set_error(grammar_error, (std::string(to_string(e.code())) + " at " + std::to_string(e.offset()) + ": " +
                                    e.what())
                                       .c_str());
    }
  });

  py::class_<BoundingBox>(m, "BoundingBox")
      .def(py::init<int, int, int, int>(), py::arg("x0"), py::arg("y0"), py::arg("x1"), py::arg("y1"))
      .def_readwrite("x0", &BoundingBox::x0)
      .def_readwrite("y0", &BoundingBox::y0)
      .def_readwrite("x1", &BoundingBox::x1)
      .def_readwrite("y1", &BoundingBox::y1)
      .def("__eq__", [](const BoundingBox& a, const BoundingBox& b) { return a == b; })
      .def("__repr__", [](const BoundingBox& b) {
        return "BoundingBox(" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " + std::to_string(b.x1) +
               ", " + std::to_string(b.y1) + ")";
      });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("fuse_boxes", [](const std::vector<BoundingBox>& boxes) { return fuse_boxes(boxes); }, py::arg("boxes"));

  m.def("encode", [](const std::string& text) { return vocab().lex(text); }, py::arg("text"),
        "Token ids of text that may contain marker strings.");
  m.def("decode", [](const std::vector<TokenId>& ids) { return vocab().decode(ids); }, py::arg("ids"));
  m.def("canonical", [](const std::string& text) { return render_text(parse_text(text, vocab()), vocab()); },
        py::arg("text"), "Parses an interleaved sequence and renders it back; raises GrammarError when malformed.");

  m.def("scaled_task_mix", [](double scale) {
    std::map<std::string, int> out;
    for (const auto& [t, n] : scaled_task_mix(scale)) out[std::string(to_string(t))] = n;
    return out;
  });

  m.def(
      "_corpus",
      [](double scale, std::uint64_t seed, const std::string& mock) {
        CorpusRequest req;
        req.counts = scaled_task_mix(scale);
        req.seed = seed;
        MockAnnotator annotator(seed, json::parse(mock).get<MockErrorRates>());
        const CorpusResult corpus = assemble_corpus(req, annotator, vocab());
        json records = json::array();
        for (const auto& r : corpus.records) records.push_back(record_to_json(r, vocab()));
        json outcomes = json::object();
        for (const auto& [o, n] : corpus.outcomes) outcomes[std::string(to_string(o))] = n;
        return json{{"records", records}, {"outcomes", outcomes}, {"stats", stats_csv(corpus.stats)}}.dump();
      },
      py::arg("scale"), py::arg("seed"), py::arg("mock"));

  m.def("read_png", [](const std::string& path) { return image_to_array(read_png(path)); }, py::arg("path"));
  m.def("write_png", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
                        const std::string& path) { write_png(image_from_array(a), path); },
        py::arg("image"), py::arg("path"));

  py::class_<Model>(m, "Model")
      .def_static(
          "_init",
          [](const std::string& config, std::uint64_t seed) {
            ModelConfig c = json::parse(config).get<ModelConfig>();
            if (c.rifrem_layers.empty()) c.rifrem_layers = all_layers(c.layers);
            c.validate();
            return Model{Weights<float>::init(c, seed)};
          },
          py::arg("config"), py::arg("seed"))
      .def_static("load", [](const std::string& path) { return Model{load_checkpoint(path)}; }, py::arg("path"))
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(self.weights, path); },
           py::arg("path"))
      .def_property_readonly("_config", [](const Model& self) { return json(self.weights.config).dump(); })
      .def_property_readonly("parameter_count", [](const Model& self) { return self.weights.parameter_count(); })
      .def(
          "_generate",
          [](const Model& self, const py::list& images, const std::string& question, bool rifrem, int budget) {
            std::vector<Image> imgs = images_from(images);
            GenerationOptions opts;
            opts.rifrem.layers = self.weights.config.rifrem_layers;
            opts.rifrem.enabled = rifrem;
            opts.step_budget = budget;
            GreedyPicker picker;
            GenerationResult r;
            {
              py::gil_scoped_release release;
              r = generate(self.weights, vocab(), std::move(imgs), question, picker, opts);
            }
            return transcript_json(r, vocab()).dump(-1, ' ', false, json::error_handler_t::replace);
          },
          py::arg("images"), py::arg("question"), py::arg("rifrem") = true, py::arg("budget") = kDefaultStepBudget)
      .def(
          "_evaluate",
          [](const Model& self, const std::string& family, std::size_t count, std::uint64_t seed, bool rifrem) {
            EvalTask task;
            task.family = eval_family_from_string(family);
            task.count = count;
            task.seed = seed;
            EvalOptions opts;
            opts.rifrem.layers = self.weights.config.rifrem_layers;
            opts.rifrem.enabled = rifrem;
            EvalResult r;
            {
              py::gil_scoped_release release;
              r = evaluate(self.weights, vocab(), task, opts);
            }
            return json{{"family", family}, {"rifrem", rifrem}, {"correct", r.correct}, {"total", r.total},
                        {"accuracy", r.accuracy}}
                .dump();
          },
          py::arg("family"), py::arg("count"), py::arg("seed"), py::arg("rifrem"));
}
