#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "condenser/attention.hpp"
#include "condenser/checkpoint.hpp"
#include "condenser/config.hpp"
#include "condenser/io_util.hpp"
#include "condenser/parallel.hpp"
#include "condenser/retrieval.hpp"
#include "condenser/synthetic.hpp"
#include "condenser/training.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace condenser;

namespace {

using PassageTuple = std::tuple<std::string, std::string>;
using PairTuple = std::tuple<std::string, std::string, std::string, std::vector<std::string>>;

// Python dict <-> nlohmann::json through the json module; keeps the strict
// key checking of the C++ readers.
nlohmann::json to_cpp(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

template <typename T>
T parse(const py::object& obj) {
  return to_cpp(obj).get<T>();
}

std::vector<Passage> to_passages(const std::vector<PassageTuple>& items) {
  std::vector<Passage> out;
  for (const auto& [id, text] : items) out.push_back({id, text});
  return out;
}

std::vector<PassageTuple> from_passages(const std::vector<Passage>& items) {
  std::vector<PassageTuple> out;
  for (const auto& p : items) out.emplace_back(p.id, p.text);
  return out;
}

std::vector<TrainingPair> to_pairs(const std::vector<PairTuple>& items) {
  std::vector<TrainingPair> out;
  for (const auto& [q, text, pos, negs] : items) out.push_back({q, text, pos, negs});
  return out;
}

std::vector<PairTuple> from_pairs(const std::vector<TrainingPair>& items) {
  std::vector<PairTuple> out;
  for (const auto& p : items) out.emplace_back(p.query_id, p.query_text, p.positive_id, p.negative_ids);
  return out;
}

py::array_t<double> to_array(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  py::array_t<double> out({rows.size(), dim});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j) view(i, j) = rows[i][j];
  return out;
}

py::dict step_dict(const StepLog& s) {
  return py::dict("step"_a = s.step, "lr"_a = s.lr, "total"_a = s.total, "head"_a = s.head,
                  "backbone"_a = s.backbone, "masked"_a = s.masked);
}

py::dict profile_dict(const EntropyProfile& p) {
  return py::dict("mean"_a = p.mean, "std"_a = p.stddev, "samples"_a = p.samples, "tag"_a = p.tag);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Condenser pre-training, dense retrieval and attention analysis";

  auto base = py::register_exception<Error>(m, "CondenserError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("set_num_threads", &set_num_threads, "n"_a);
  m.def("num_threads", &num_threads);
  m.def("default_model_config", [] { return to_py(nlohmann::json(ModelConfig{})); });
  m.def("default_pretrain_options", [] { return to_py(nlohmann::json(PretrainOptions{})); });
  m.def("default_finetune_options", [] { return to_py(nlohmann::json(FinetuneOptions{})); });

  py::class_<text::Vocabulary>(m, "Vocabulary")
      .def_static("build", &text::Vocabulary::build, "corpus"_a, "max_size"_a = 0, "min_count"_a = 1)
      .def_static("from_tokens", &text::Vocabulary::from_tokens, "tokens"_a)
      .def_static("load", &text::Vocabulary::load, "path"_a)
      .def("save", &text::Vocabulary::save, "path"_a)
      .def("__len__", &text::Vocabulary::size)
      .def("id", &text::Vocabulary::id, "token"_a)
      .def("token", &text::Vocabulary::token, "id"_a)
      .def("encode", &text::Vocabulary::encode, "text"_a, "max_len"_a)
      .def("decode", [](const text::Vocabulary& v, const std::vector<int>& ids) { return v.decode(ids); }, "ids"_a);

  m.def("tokenize", &text::tokenize, "text"_a);

  py::class_<Encoder>(m, "Encoder")
      .def(py::init([](const py::object& config, std::uint64_t seed) { return Encoder(parse<ModelConfig>(config), seed); }),
           "config"_a, "seed"_a = 0)
      .def_property_readonly("config", [](const Encoder& e) { return to_py(nlohmann::json(e.config())); })
      .def("parameter_count", &Encoder::parameter_count)
      .def(
          "encode",
          [](const Encoder& e, const text::Vocabulary& vocab, const std::vector<std::string>& texts,
             std::size_t max_len, std::size_t batch_size) {
            return to_array(encode_texts(e, vocab, texts, max_len, batch_size), e.config().hidden_dim);
          },
          "vocab"_a, "texts"_a, "max_len"_a = 32, "batch_size"_a = 32)
      .def(
          "save",
          [](const Encoder& e, const std::filesystem::path& path, const py::object& metadata) {
            save_checkpoint(e, path, to_cpp(metadata));
          },
          "path"_a, "metadata"_a = py::none())
      .def_static("load", &load_encoder, "path"_a);

  py::class_<PretrainModel>(m, "PretrainModel")
      .def(py::init([](const py::object& config, const std::string& kind, std::uint64_t seed) {
             return PretrainModel(parse<ModelConfig>(config), model_kind_from_string(kind), seed);
           }),
           "config"_a, "kind"_a = "condenser-full", "seed"_a = 0)
      .def_property_readonly("kind", [](const PretrainModel& p) { return to_string(p.kind()); })
      .def_property_readonly("config", [](const PretrainModel& p) { return to_py(nlohmann::json(p.config())); })
      .def("parameter_count", &PretrainModel::parameter_count)
      .def("head_parameter_count", [](const PretrainModel& p) { return count_parameters(p.head_parameters()); })
      .def("reduce", &PretrainModel::reduce_to_encoder, "The backbone encoder without head and projection")
      .def(
          "save",
          [](const PretrainModel& p, const std::filesystem::path& path, const py::object& metadata) {
            save_checkpoint(p, path, to_cpp(metadata));
          },
          "path"_a, "metadata"_a = py::none())
      .def_static("load", &load_pretrain_model, "path"_a);

  py::class_<Pretrainer>(m, "Pretrainer")
      .def(py::init([](const PretrainModel& model, std::vector<std::vector<int>> docs, const py::object& options) {
             return Pretrainer(model.clone(), std::move(docs), parse<PretrainOptions>(options));
           }),
           "model"_a, "documents"_a, "options"_a = py::none())
      .def_static(
          "resume",
          [](const std::filesystem::path& state_path, std::vector<std::vector<int>> docs) {
            auto state = load_train_state(state_path);
            return Pretrainer(state, std::move(docs), state.config, state.kind, state.options);
          },
          "state_path"_a, "documents"_a)
      .def_property_readonly("step", &Pretrainer::step)
      .def_property_readonly("total_steps", &Pretrainer::total_steps)
      .def_property_readonly("done", &Pretrainer::done)
      .def("train_step", [](Pretrainer& t) { return step_dict(t.train_step()); })
      .def(
          "run",
          [](Pretrainer& t, std::optional<std::size_t> max_steps) {
            py::list out;
            for (const auto& s : t.run(max_steps.value_or(std::numeric_limits<std::size_t>::max())))
              out.append(step_dict(s));
            return out;
          },
          "max_steps"_a = py::none())
      .def("model", [](const Pretrainer& t) { return t.model().clone(); }, "Copy of the current model")
      .def(
          "save_state", [](const Pretrainer& t, const std::filesystem::path& path) { save_train_state(t.state(), path); },
          "path"_a);

  m.def("encode_corpus", &text::encode_all, "corpus"_a, "vocab"_a, "max_len"_a);

  m.def(
      "finetune_retriever",
      [](const Encoder& init, const text::Vocabulary& vocab, const std::vector<PairTuple>& pairs,
         const std::vector<PassageTuple>& passages, const py::object& options) {
        auto fo = parse<FinetuneOptions>(options);
        Retriever r(init.clone(), fo.two_tower);
        auto report = finetune_retriever(r, vocab, to_pairs(pairs), to_passages(passages), fo);
        py::object passage = fo.two_tower ? py::cast(r.passage_encoder().clone()) : py::none();
        return py::make_tuple(r.query_encoder().clone(), passage, report.losses);
      },
      "encoder"_a, "vocab"_a, "pairs"_a, "passages"_a, "options"_a = py::none(),
      "Returns (query_encoder, passage_encoder or None, losses).");
  m.def(
      "finetune_regression",
      [](const Encoder& init, const text::Vocabulary& vocab,
         const std::vector<std::tuple<std::string, std::string, double>>& pairs, const py::object& options) {
        std::vector<ScoredPair> sp;
        for (const auto& [a, b, s] : pairs) sp.push_back({a, b, s});
        Encoder e = init.clone();
        auto report = finetune_regression(e, vocab, sp, parse<FinetuneOptions>(options));
        return py::make_tuple(std::move(e), report.losses);
      },
      "encoder"_a, "vocab"_a, "pairs"_a, "options"_a = py::none());
  m.def(
      "finetune_triplet",
      [](const Encoder& init, const text::Vocabulary& vocab,
         const std::vector<std::tuple<std::string, std::string, std::string>>& triplets, const py::object& options) {
        std::vector<Triplet> ts;
        for (const auto& [a, p, n] : triplets) ts.push_back({a, p, n});
        Encoder e = init.clone();
        auto report = finetune_triplet(e, vocab, ts, parse<FinetuneOptions>(options));
        return py::make_tuple(std::move(e), report.losses);
      },
      "encoder"_a, "vocab"_a, "triplets"_a, "options"_a = py::none());

  py::class_<DenseIndex>(m, "DenseIndex")
      .def(py::init([](const std::vector<std::string>& ids, py::array_t<double, py::array::c_style | py::array::forcecast> v) {
             if (v.ndim() != 2) throw ShapeError("DenseIndex: vectors must be 2-D");
             std::vector<double> flat(v.data(), v.data() + v.size());
             return DenseIndex(static_cast<std::size_t>(v.shape(1)), ids, std::move(flat));
           }),
           "ids"_a, "vectors"_a)
      .def_static(
          "build",
          [](const Encoder& e, const text::Vocabulary& vocab, const std::vector<PassageTuple>& passages,
             std::size_t max_len) { return build_index(e, vocab, to_passages(passages), max_len); },
          "encoder"_a, "vocab"_a, "passages"_a, "max_len"_a = 32)
      .def_static("load", &DenseIndex::load, "path"_a)
      .def("save", &DenseIndex::save, "path"_a)
      .def("__len__", &DenseIndex::size)
      .def_property_readonly("dim", &DenseIndex::dim)
      .def_property_readonly("ids", &DenseIndex::ids)
      .def(
          "search",
          [](const DenseIndex& index, const std::vector<double>& query, std::size_t k) {
            std::vector<std::tuple<std::string, double>> out;
            for (const auto& h : index.search(query, k)) out.emplace_back(h.id, h.score);
            return out;
          },
          "query"_a, "k"_a);

  m.def("topk_hit", &topk_hit, "ranking"_a, "relevant"_a, "k"_a);
  m.def("mrr_at_k", &mrr_at_k, "ranking"_a, "relevant"_a, "k"_a);
  m.def("recall_at_k", &recall_at_k, "ranking"_a, "relevant"_a, "k"_a);
  m.def("ndcg_at_k", &ndcg_at_k, "ranking"_a, "relevant"_a, "k"_a);
  m.def(
      "evaluate_run",
      [](const std::map<std::string, std::vector<std::tuple<std::string, double>>>& run, const Qrels& qrels,
         const std::string& metric) {
        condenser::Run r;
        for (const auto& [q, hits] : run)
          for (const auto& [id, score] : hits) r[q].push_back({id, score});
        auto [kind, k] = parse_metric(metric);
        return mean_metric(r, qrels, kind, k);
      },
      "run"_a, "qrels"_a, "metric"_a, "Mean of e.g. 'mrr@10' over judged queries.");
  m.def("spearman", &spearman, "predicted"_a, "gold"_a);
  m.def(
      "pairwise_accuracy",
      [](const Encoder& e, const text::Vocabulary& vocab,
         const std::vector<std::tuple<std::string, std::string, std::string>>& triplets, std::size_t max_len) {
        std::vector<Triplet> ts;
        for (const auto& [a, p, n] : triplets) ts.push_back({a, p, n});
        return pairwise_accuracy(e, vocab, ts, max_len);
      },
      "encoder"_a, "vocab"_a, "triplets"_a, "max_len"_a = 32);
  m.def("contrastive_nll", &contrastive_nll, "positive_score"_a, "negative_scores"_a);

  m.def("entropy", [](const std::vector<double>& p) { return entropy(p); }, "probs"_a);
  m.def(
      "cls_attention_entropy",
      [](const Encoder& e, const text::Vocabulary& vocab, const std::vector<std::string>& docs, std::size_t max_len,
         std::size_t max_samples, const std::string& tag) {
        return profile_dict(cls_attention_entropy(e, vocab, docs, max_len, max_samples, tag));
      },
      "encoder"_a, "vocab"_a, "documents"_a, "max_len"_a = 32, "max_samples"_a = 256, "tag"_a = "");

  m.def(
      "make_synthetic_dataset",
      [](std::size_t topics, std::size_t passages_per_topic, std::size_t documents_per_topic, std::size_t train_pairs,
         std::size_t explicit_negatives, std::uint64_t seed) {
        SyntheticOptions so;
        so.topics = topics;
        so.passages_per_topic = passages_per_topic;
        so.documents_per_topic = documents_per_topic;
        so.train_pairs = train_pairs;
        so.explicit_negatives = explicit_negatives;
        so.seed = seed;
        auto d = make_synthetic_dataset(so);
        std::vector<std::tuple<std::string, std::string, double>> scored;
        for (const auto& p : d.scored_pairs) scored.emplace_back(p.text_a, p.text_b, p.score);
        std::vector<std::tuple<std::string, std::string, std::string>> triplets;
        for (const auto& t : d.triplets) triplets.emplace_back(t.anchor, t.positive, t.negative);
        return py::dict("documents"_a = d.documents, "passages"_a = from_passages(d.passages),
                        "train_pairs"_a = from_pairs(d.train_pairs), "test_queries"_a = from_passages(d.test_queries),
                        "test_qrels"_a = d.test_qrels, "train_qrels"_a = d.train_qrels, "scored_pairs"_a = scored,
                        "triplets"_a = triplets);
      },
      "topics"_a = 16, "passages_per_topic"_a = 8, "documents_per_topic"_a = 16, "train_pairs"_a = 32,
      "explicit_negatives"_a = 3, "seed"_a = 0);
}
