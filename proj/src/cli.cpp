#include "aag/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "aag/errors.hpp"
#include "aag/evaluation.hpp"
#include "aag/image_io.hpp"
#include "aag/weight_file.hpp"

namespace fs = std::filesystem;

namespace aag {

MultiTaskModelSpec RunConfig::model_spec() const {
  auto spec = backbone_from_string(model) == BackboneKind::AttentionNet ? MultiTaskModelSpec::attention_net()
                                                                         : MultiTaskModelSpec::resnet_lite();
  spec.input_size = input_size;
  if (base_channels > 0) spec.base_channels = base_channels;
  spec.gender_augmentation = gender_augmentation;
  spec.detach_gender_input = detach_gender;
  spec.init_seed = train.seed;
  spec.validate();
  return spec;
}

nlohmann::json RunConfig::to_json() const {
  return {{"command", command},
          {"dataset", dataset},
          {"out", out},
          {"model", model},
          {"input_size", input_size},
          {"base_channels", base_channels},
          {"gender_augmentation", gender_augmentation},
          {"detach_gender", detach_gender},
          {"train", train.to_json()},
          {"weights", weights},
          {"images", images},
          {"split_seed", split_seed},
          {"subset", subset},
          {"partition", partition},
          {"resume", resume},
          {"allow_config_mismatch", allow_config_mismatch},
          {"per_channel", per_channel}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.command = j.at("command").get<std::string>();
    c.dataset = j.value("dataset", c.dataset);
    c.out = j.value("out", c.out);
    c.model = j.value("model", c.model);
    c.input_size = j.value("input_size", c.input_size);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.gender_augmentation = j.value("gender_augmentation", c.gender_augmentation);
    c.detach_gender = j.value("detach_gender", c.detach_gender);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.weights = j.value("weights", c.weights);
    c.images = j.value("images", c.images);
    c.split_seed = j.value("split_seed", c.split_seed);
    c.subset = j.value("subset", c.subset);
    c.partition = j.value("partition", c.partition);
    c.resume = j.value("resume", c.resume);
    c.allow_config_mismatch = j.value("allow_config_mismatch", c.allow_config_mismatch);
    c.per_channel = j.value("per_channel", c.per_channel);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad run config: ") + e.what());
  }
  return c;
}

std::vector<SampleRecord> take_subset(std::vector<SampleRecord> records, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= records.size()) return records;
  std::vector<std::pair<std::uint64_t, std::string>> keys;
  for (const auto& r : records) keys.emplace_back(keyed_hash(r.filename(), seed ^ 0x5eb5e7ull), r.filename());
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<SampleRecord> out;
  for (auto i : order) out.push_back(std::move(records[i]));
  return out;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ArgumentError(what);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << "\n";
}

void write_config(const RunConfig& cfg) {
  if (cfg.out.empty()) return;
  fs::create_directories(cfg.out);
  write_json(cfg.out + "/config.json", cfg.to_json());
}

DatasetSplit load_split(const RunConfig& cfg, Census* census = nullptr) {
  require(!cfg.dataset.empty(), "--dataset is required");
  auto scan = scan_dataset(cfg.dataset, BucketScheme{});
  auto records = take_subset(std::move(scan.records), cfg.subset, cfg.split_seed);
  if (census) {
    *census = cfg.subset ? make_census(records, BucketScheme{}) : scan.census;
    census->skipped = scan.census.skipped;
  }
  return split_dataset(records, cfg.split_seed);
}

void cmd_prepare(const RunConfig& cfg, std::ostream& out) {
  require(!cfg.out.empty(), "--out is required");
  Census census;
  const auto split = load_split(cfg, &census);
  write_config(cfg);
  BucketScheme scheme;
  write_json(cfg.out + "/census.json", census.to_json(scheme));
  write_json(cfg.out + "/split.json", split.manifest());
  out << "total " << census.total << " male " << census.male << " female " << census.female << " skipped "
      << census.skipped.size() << "\n";
  out << "train " << split.train.size() << " val " << split.val.size() << " test " << split.test.size() << "\n";
}

template <typename T>
std::vector<MultiTaskModel<T>> load_models(const RunConfig& cfg) {
  require(!cfg.weights.empty(), "--weights is required");
  std::vector<MultiTaskModel<T>> models;
  models.reserve(cfg.weights.size());
  for (const auto& w : cfg.weights) models.push_back(model_from_weights<T>(WeightFile::load(w)));
  for (const auto& m : models) {
    if (m.spec().num_age_buckets != models.front().spec().num_age_buckets) {
      throw ConfigError("weight files disagree on the number of age buckets (" +
                        std::to_string(models.front().spec().num_age_buckets) + " vs " +
                        std::to_string(m.spec().num_age_buckets) + ")");
    }
    if (m.spec().input_size != models.front().spec().input_size) {
      throw ConfigError("weight files disagree on the input size");
    }
  }
  return models;
}

template <typename T>
std::vector<MultiTaskModel<T>*> pointers(std::vector<MultiTaskModel<T>>& models) {
  std::vector<MultiTaskModel<T>*> p;
  for (auto& m : models) p.push_back(&m);
  return p;
}

template <typename T>
void cmd_train(const RunConfig& cfg, std::ostream& out) {
  require(!cfg.out.empty(), "--out is required");
  const auto spec = cfg.model_spec();
  const auto split = load_split(cfg);
  write_config(cfg);
  Trainer<T> trainer(spec, cfg.train, split.train, split.val, cfg.out);
  if (!cfg.resume.empty()) trainer.resume(WeightFile::load(cfg.resume), cfg.allow_config_mismatch);
  out << "training " << cfg.model << " on " << split.train.size() << " images (" << trainer.model().parameter_count()
      << " parameters)\n";
  while (trainer.epoch() < cfg.train.epochs) out << trainer.run_epoch().to_json().dump() << std::endl;
  out << "wrote " << cfg.out << "/best.aagw and " << cfg.out << "/last.aagw\n";
}

template <typename T>
void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  require(!cfg.out.empty(), "--out is required");
  auto models = load_models<T>(cfg);
  const auto split = load_split(cfg);
  const auto& records = split.get(parse_partition(cfg.partition));
  if (records.empty()) throw DataError("the " + cfg.partition + " partition is empty");
  write_config(cfg);
  BucketScheme scheme;
  scheme.count = static_cast<int>(models.front().spec().num_age_buckets);
  BatchLoader loader(records, models.front().spec().input_size);
  const auto ptrs = pointers(models);
  const auto res = evaluate<T>(ptrs, loader, cfg.train.batch_size, scheme);
  res.report.write(cfg.out, "metrics");
  if (models.size() > 1) {
    for (std::size_t i = 0; i < res.member_reports.size(); ++i) {
      res.member_reports[i].write(cfg.out, "member" + std::to_string(i + 1) + "_metrics");
    }
  }
  auto summary = res.report.to_json();
  summary["models"] = models.size();
  summary["partition"] = cfg.partition;
  out << summary.dump(2) << "\n";
}

template <typename T>
Tensor<T> to_tensor(const std::vector<FloatImage>& imgs, std::size_t size) {
  const std::size_t per = 3 * size * size;
  std::vector<float> scratch(per);
  std::vector<T> data;
  for (const auto& img : imgs) {
    normalize_into(img, scratch.data());
    data.insert(data.end(), scratch.begin(), scratch.end());
  }
  return Tensor<T>::from_data({imgs.size(), 3, size, size}, std::move(data));
}

struct Decoded {
  std::vector<FloatImage> images;
  std::vector<std::size_t> source;  // index into cfg.images
  std::vector<std::string> errors;  // per input image, empty on success
};

Decoded decode_all(const std::vector<std::string>& paths, std::size_t size) {
  Decoded d;
  d.errors.resize(paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    try {
      d.images.push_back(resize_bilinear(to_float_rgb(read_image(paths[i])), size, size));
      d.source.push_back(i);
    } catch (const Error& e) {
      d.errors[i] = e.what();
    }
  }
  return d;
}

template <typename T>
void cmd_predict(const RunConfig& cfg, std::ostream& out) {
  require(!cfg.images.empty(), "no images given");
  auto models = load_models<T>(cfg);
  const std::size_t size = models.front().spec().input_size;
  BucketScheme scheme;
  scheme.count = static_cast<int>(models.front().spec().num_age_buckets);
  const auto decoded = decode_all(cfg.images, size);
  std::vector<Prediction> preds;
  if (!decoded.images.empty()) {
    const auto x = to_tensor<T>(decoded.images, size);
    std::vector<std::vector<Prediction>> per_model;
    for (auto& m : models) per_model.push_back(m.predict(x));
    preds = per_model.size() == 1 ? per_model[0] : ensemble_predict(std::span<const std::vector<Prediction>>(per_model));
  }
  nlohmann::json result = nlohmann::json::array();
  std::size_t next = 0;
  for (std::size_t i = 0; i < cfg.images.size(); ++i) {
    nlohmann::json entry{{"image", cfg.images[i]}};
    if (!decoded.errors[i].empty()) {
      entry["error"] = decoded.errors[i];
    } else {
      const auto& p = preds[next++];
      const auto g = p.gender();
      const auto a = static_cast<int>(p.age_bucket());
      entry["gender"] = {{"label", to_string(static_cast<Gender>(g))}, {"prob", p.gender_probs[g]}};
      entry["age"] = {{"bucket", a},
                      {"display_index", scheme.display_index(a)},
                      {"label", scheme.label(a)},
                      {"prob", p.age_probs[a]}};
      entry["gender_probs"] = p.gender_probs;
      entry["age_probs"] = p.age_probs;
    }
    result.push_back(entry);
  }
  if (!cfg.out.empty()) {
    write_config(cfg);
    write_json(cfg.out + "/predictions.json", result);
  }
  out << result.dump(2) << "\n";
  if (decoded.images.empty()) throw DataError("none of the images could be decoded");
}

template <typename T>
void cmd_export_attention(const RunConfig& cfg, std::ostream& out) {
  require(cfg.weights.size() == 1, "export-attention takes exactly one weight file");
  require(!cfg.out.empty(), "--out is required");
  require(!cfg.images.empty(), "no images given");
  auto models = load_models<T>(cfg);
  auto& model = models.front();
  if (model.backbone().attention_modules() == 0) {
    throw UnsupportedError("attention maps need an attention-net model; " + cfg.weights[0] + " is " +
                           to_string(model.spec().backbone));
  }
  const std::size_t size = model.spec().input_size;
  const auto decoded = decode_all(cfg.images, size);
  for (std::size_t i = 0; i < cfg.images.size(); ++i) {
    if (!decoded.errors[i].empty()) std::cerr << "warning: " << cfg.images[i] << ": " << decoded.errors[i] << "\n";
  }
  if (decoded.images.empty()) throw DataError("none of the images could be decoded");
  write_config(cfg);
  const auto taps = model.attention_taps(to_tensor<T>(decoded.images, size));
  for (std::size_t k = 0; k < decoded.images.size(); ++k) {
    const std::string id = fs::path(cfg.images[decoded.source[k]]).stem().string();
    for (const auto& p : export_attention_maps(taps, k, id, cfg.out, size, cfg.per_channel)) out << p << "\n";
  }
}

template <typename T>
void execute_typed(const RunConfig& cfg, std::ostream& out) {
  if (cfg.command == "train") return cmd_train<T>(cfg, out);
  if (cfg.command == "eval") return cmd_eval<T>(cfg, out);
  if (cfg.command == "predict") return cmd_predict<T>(cfg, out);
  if (cfg.command == "export-attention") return cmd_export_attention<T>(cfg, out);
  throw ArgumentError("unknown command '" + cfg.command + "'");
}

}  // namespace

void execute(const RunConfig& cfg, std::ostream& out) {
  cfg.train.validate();
  if (cfg.command == "prepare") return cmd_prepare(cfg, out);
  if (cfg.train.precision == Precision::F64) return execute_typed<double>(cfg, out);
  execute_typed<float>(cfg, out);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Age-bucket and gender prediction with residual attention networks", "aag"};
  app.require_subcommand(1);
  app.footer("Every option can also be set through an AAG_ environment variable, e.g. AAG_EPOCHS=30.");

  RunConfig cfg;
  std::string precision = "f32";
  bool no_augment = false, no_gender_aug = false;
  std::string config_path;

  auto dataset = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--dataset", cfg.dataset, "Directory of UTK-style images")->envname("AAG_DATASET");
    if (required) o->required();
    s->add_option("--split-seed", cfg.split_seed, "Seed of the train/val/test split")->envname("AAG_SPLIT_SEED");
    s->add_option("--subset", cfg.subset, "Use only N images (0 = all)")->envname("AAG_SUBSET");
  };
  auto output = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--out", cfg.out, "Output directory")->envname("AAG_OUT");
    if (required) o->required();
  };
  auto prec = [&](CLI::App* s) {
    s->add_option("--precision", precision, "Scalar type")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->envname("AAG_PRECISION");
  };
  // Commands with positional image arguments take one path per --weights so
  // the images are not swallowed; repeat the flag for an ensemble.
  auto weights = [&](CLI::App* s, bool greedy) {
    auto* o = s->add_option("--weights", cfg.weights, "Weight file(s); several form an ensemble")
                  ->required()
                  ->envname("AAG_WEIGHTS");
    if (greedy) {
      o->expected(1, -1);
    } else {
      o->allow_extra_args(false);
    }
  };
  auto batch = [&](CLI::App* s) {
    s->add_option("--batch-size", cfg.train.batch_size, "Batch size")->envname("AAG_BATCH_SIZE");
  };

  auto* prepare = app.add_subcommand("prepare", "Scan a dataset, write census and split manifest");
  dataset(prepare, true);
  output(prepare, true);

  auto* train = app.add_subcommand("train", "Train one backbone");
  dataset(train, true);
  output(train, true);
  prec(train);
  batch(train);
  train->add_option("--model", cfg.model, "Backbone")
      ->check(CLI::IsMember({"attention-net", "resnet-lite"}))
      ->envname("AAG_MODEL");
  train->add_option("--epochs", cfg.train.epochs, "Epochs")->envname("AAG_EPOCHS");
  train->add_option("--lr", cfg.train.learning_rate, "Adam learning rate")->envname("AAG_LR");
  train->add_option("--seed", cfg.train.seed, "Seed for initialization and data order")->envname("AAG_SEED");
  train->add_option("--input-size", cfg.input_size, "Input side length")->envname("AAG_INPUT_SIZE");
  train->add_option("--lambda-age", cfg.train.lambda_age, "Weight of the age loss")->envname("AAG_LAMBDA_AGE");
  train->add_option("--base-channels", cfg.base_channels, "Override the backbone width")->envname("AAG_BASE_CHANNELS");
  train->add_option("--eval-every", cfg.train.eval_every, "Validate every N epochs")->envname("AAG_EVAL_EVERY");
  train->add_flag("--detach-gender", cfg.detach_gender, "Stop the age loss at the gender probabilities")
      ->envname("AAG_DETACH_GENDER");
  train->add_flag("--no-gender-aug", no_gender_aug, "Age head without gender probabilities")
      ->envname("AAG_NO_GENDER_AUG");
  train->add_flag("--no-augment", no_augment, "Disable horizontal flips")->envname("AAG_NO_AUGMENT");
  train->add_option("--resume", cfg.resume, "Continue from a checkpoint")->envname("AAG_RESUME");
  train->add_flag("--allow-config-mismatch", cfg.allow_config_mismatch, "Resume despite a config hash mismatch");

  auto* eval = app.add_subcommand("eval", "Evaluate one model or an ensemble on a split");
  dataset(eval, true);
  output(eval, true);
  weights(eval, true);
  prec(eval);
  batch(eval);
  eval->add_option("--split", cfg.partition, "Partition")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->envname("AAG_SPLIT");

  auto* predict = app.add_subcommand("predict", "Predict gender and age bucket for images");
  weights(predict, false);
  prec(predict);
  output(predict, false);
  predict->add_option("images", cfg.images, "Image files")->required();

  auto* attention = app.add_subcommand("export-attention", "Write attention maps as PGM/PPM");
  weights(attention, false);
  prec(attention);
  output(attention, true);
  attention->add_flag("--per-channel", cfg.per_channel, "Also write one map per mask channel");
  attention->add_option("images", cfg.images, "Image files")->required();

  auto* rerun = app.add_subcommand("rerun", "Execute a config.json written by an earlier command");
  rerun->add_option("config", config_path, "config.json")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitBadInput;
  }

  try {
    if (rerun->parsed()) {
      std::ifstream in(config_path);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) throw FormatError(config_path + " is not valid JSON");
      cfg = RunConfig::from_json(j);
    } else {
      cfg.command = app.get_subcommands().front()->get_name();
      cfg.train.precision = parse_precision(precision);
      cfg.train.augment = !no_augment;
      cfg.gender_augmentation = !no_gender_aug;
    }
    execute(cfg, out);
    return kExitOk;
  } catch (const UnsupportedError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUnsupported;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace aag
