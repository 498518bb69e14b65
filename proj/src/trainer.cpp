#include "tcil/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>
#include <set>

#include "tcil/checkpoint.hpp"
#include "tcil/errors.hpp"
#include "tcil/pruning.hpp"

namespace fs = std::filesystem;

namespace tcil {

double lr_at_epoch(const ScheduleConfig& schedule, double base_lr, int epoch) {
  if (epoch < 0) throw input_error("epoch must be >= 0");
  if (epoch < schedule.warmup_epochs)
    return base_lr * (epoch + 1) / schedule.warmup_epochs;
  double lr = base_lr;
  for (int m : schedule.milestones)
    if (epoch >= m) lr *= schedule.decay;
  return lr;
}

namespace {

void acc(Tensor& slot, const Tensor& term) { slot = slot.defined() ? add(slot, term) : term; }

int argmax_index(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

bool in_top5(const std::vector<double>& v, int index) {
  int higher = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    if (static_cast<int>(i) == index) continue;
    if (v[i] > v[static_cast<size_t>(index)] ||
        (v[i] == v[static_cast<size_t>(index)] && static_cast<int>(i) < index))
      ++higher;
  }
  return higher < 5;
}

LossBundle& operator+=(LossBundle& a, const LossBundle& b) {
  a.clf += b.clf;
  a.feat_kd += b.feat_kd;
  a.logit_kd += b.logit_kd;
  a.div += b.div;
  a.total += b.total;
  return a;
}

LossBundle scaled(const LossBundle& a, double s) {
  return {a.clf * s, a.feat_kd * s, a.logit_kd * s, a.div * s, a.total * s};
}

}  // namespace

Trainer::Trainer(const ExperimentConfig& config, Dataset dataset, std::string out_dir)
    : config_(config), dataset_(std::move(dataset)), out_dir_(std::move(out_dir)) {
  config_.validate();
  effective_loss_ = config_.loss;
  if (config_.memory_budget == 0 && effective_loss_.lambda != 0.0) {
    std::cerr << "[trainer] note: budget 0 is the non-rehearsal setting; forcing lambda to 0\n";
    effective_loss_.lambda = 0.0;
  }

  std::optional<std::vector<int>> order;
  if (config_.class_order_file) order = load_class_order(*config_.class_order_file);
  stream_ = build_stream(dataset_.train_labels(), protocol_from_string(config_.protocol),
                         config_.steps, config_.seed, order);
  memory_ = ExemplarMemory(config_.memory_budget, selection_from_string(config_.selection),
                           config_.seed);
  for (const DataItem& item : dataset_.train) train_by_id_[item.id] = &item;
}

void Trainer::rebuild_class_index(int t) {
  index_to_class_.clear();
  class_to_index_.clear();
  for (int s = 0; s < t; ++s)
    for (int c : stream_.class_batches[static_cast<size_t>(s)]) {
      class_to_index_[c] = static_cast<int>(index_to_class_.size());
      index_to_class_.push_back(c);
    }
}

Tensor Trainer::image_tensor(const DataItem& item) const {
  return Tensor::from({dataset_.channels, dataset_.image_size, dataset_.image_size}, item.image);
}

std::vector<Trainer::TrainSample> Trainer::collect_step_samples(const TaskStream& stream,
                                                                ExemplarMemory& memory, int t) {
  std::vector<TrainSample> out;
  for (int id : stream.sample_index[static_cast<size_t>(t - 1)]) {
    const DataItem* item = train_by_id_.at(id);
    out.push_back({id, item->label, t, false});
  }
  if (config_.method == "tcil" && config_.memory_budget > 0 && t >= 2) {
    for (const auto& [cls, id] : memory.sample_list())
      out.push_back({id, cls, stream.task_of_class(cls), true});
  }
  return out;
}

EpochStats Trainer::run_epoch_tcil(DeaModel& model, std::vector<TrainSample>& samples, Sgd& opt,
                                   LinearLayer* aux, int t, int epoch, double lr) {
  opt.set_lr(lr);
  std::mt19937_64 shuffle_rng(
      mix_seed(static_cast<uint64_t>(config_.seed), 0x100000ull + 1009ull * t + epoch));
  std::shuffle(samples.begin(), samples.end(), shuffle_rng);
  std::mt19937_64 aug_rng(
      mix_seed(static_cast<uint64_t>(config_.seed), 0x200000ull + 1009ull * t + epoch));

  const std::vector<int>& new_classes = stream_.class_batches[static_cast<size_t>(t - 1)];
  bool memory_empty = memory_.total_count() == 0;
  int batch = config_.batch_size;
  LossBundle sums;
  int batches = 0;

  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch)) {
    size_t end = std::min(samples.size(), start + static_cast<size_t>(batch));
    opt.zero_grad();
    BatchLossTerms terms;
    terms.batch_size = static_cast<int>(end - start);
    terms.kd_active = t >= 2;
    terms.memory_empty = memory_empty;

    for (size_t i = start; i < end; ++i) {
      const TrainSample& s = samples[i];
      const DataItem& item = *train_by_id_.at(s.id);
      Tensor image;
      if (config_.augmentation.any()) {
        image = Tensor::from({dataset_.channels, dataset_.image_size, dataset_.image_size},
                             augment(item.image, dataset_.channels, dataset_.image_size,
                                     config_.augmentation, aug_rng));
      } else {
        image = image_tensor(item);
      }

      std::vector<Tensor> maps = model.extract_all(image);
      Tensor logits = model.training_logits(maps);
      acc(terms.clf_sum, classification_loss(logits, class_to_index_.at(s.label)));

      if (t >= 2) {
        acc(terms.logit_sum,
            logit_kd_loss(logits, model.teacher_logits(maps), effective_loss_.temperature,
                          effective_loss_.t2_compensation));
        if (s.exemplar && effective_loss_.lambda > 0.0) {
          const Tensor& teacher_map = maps[static_cast<size_t>(s.origin_task - 1)];
          Tensor student_map = maps.back();
          if (student_map.shape()[0] != teacher_map.shape()[0])
            student_map = select_channels(
                student_map, model.extractor(s.origin_task - 1).output_channels_kept());
          if (effective_loss_.feature_kd_on == FeatureKdOn::pooled)
            acc(terms.feat_sum, feature_kd_loss(global_avg_pool(student_map),
                                                global_avg_pool(teacher_map)));
          else
            acc(terms.feat_sum, feature_kd_loss(student_map, teacher_map));
        }
        if (aux) {
          Tensor aux_logits = aux->forward(global_avg_pool(maps.back()));
          acc(terms.div_sum, divergence_loss(aux_logits, s.label, new_classes));
        }
      }
    }

    TotalLoss loss = total_loss(terms, effective_loss_);
    backward(loss.value);
    opt.step();
    sums += loss.bundle;
    log_iteration(t, epoch, batches, loss.bundle);
    ++batches;
  }

  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr;
  stats.mean = batches ? scaled(sums, 1.0 / batches) : LossBundle{};
  return stats;
}

StepReport Trainer::run_step(DeaModel& model, const TaskStream& stream, ExemplarMemory& memory,
                             int t) {
  if (t != completed_ + 1)
    throw state_error("run_step: step " + std::to_string(t) + " invoked after " +
                      std::to_string(completed_) + " completed steps");
  if (t < 1 || t > stream.num_steps) throw input_error("run_step: no step " + std::to_string(t));

  const std::vector<int>& classes_t = stream.class_batches[static_cast<size_t>(t - 1)];
  if (t >= 2) {
    model.expand(static_cast<int>(classes_t.size()));
    std::vector<std::vector<int>> ids(stream.class_batches.begin(),
                                      stream.class_batches.begin() + t);
    model.set_step_class_ids(std::move(ids));
  }
  rebuild_class_index(t);

  std::vector<TrainSample> samples = collect_step_samples(stream, memory, t);
  if (samples.empty()) throw input_error("run_step: no training samples for step " + std::to_string(t));

  std::optional<LinearLayer> aux;
  if (t >= 2) {
    std::mt19937_64 aux_rng(mix_seed(static_cast<uint64_t>(config_.seed), 0x300000ull + t));
    aux = LinearLayer(model.extractor(t - 1).out_channels(),
                      static_cast<int>(classes_t.size()) + 1, aux_rng);
  }

  std::vector<Tensor> params = model.trainable_parameters();
  if (aux) {
    params.push_back(aux->weight);
    params.push_back(aux->bias);
  }
  Sgd opt(params, {config_.optimizer.lr, config_.optimizer.momentum,
                   config_.optimizer.weight_decay});
  if (t >= 2 && !config_.model.train_old_rows) {
    // The previous classifier block stays frozen; only the new rows train.
    int old_rows = model.num_classes() - static_cast<int>(classes_t.size());
    opt.freeze_prefix(model.classifier().weight,
                      static_cast<int64_t>(old_rows) * model.classifier().feature_dim());
    if (model.classifier().bias.defined())
      opt.freeze_prefix(model.classifier().bias, old_rows);
  }

  StepReport report;
  report.step = t;
  for (int epoch = 0; epoch < config_.schedule.epochs_per_step; ++epoch) {
    double lr = lr_at_epoch(config_.schedule, config_.optimizer.lr, epoch);
    report.epochs.push_back(
        run_epoch_tcil(model, samples, opt, aux ? &*aux : nullptr, t, epoch, lr));
  }
  report.param_count = model.parameter_count();  // before any compacting

  if (config_.prune.after_each_step) {
    prune_extractor(model, t - 1, config_.prune.to_prune_config());
    if (config_.prune.recovery_epochs > 0) {
      Sgd recovery_opt(model.trainable_parameters(),
                       {config_.optimizer.lr, config_.optimizer.momentum,
                        config_.optimizer.weight_decay});
      double lr = lr_at_epoch(config_.schedule, config_.optimizer.lr,
                              config_.schedule.epochs_per_step - 1);
      for (int e = 0; e < config_.prune.recovery_epochs; ++e)
        report.epochs.push_back(run_epoch_tcil(model, samples, recovery_opt, nullptr, t,
                                               config_.schedule.epochs_per_step + e, lr));
    }
  }

  if (t >= 2) model.compute_gamma_now();
  if (config_.method == "tcil" && config_.memory_budget > 0)
    rebalance_memory_after_step(model, stream, memory, t);

  if (!report.epochs.empty()) report.final_bundle = report.epochs.back().mean;
  for (int i = 0; i < model.num_extractors(); ++i)
    report.extractor_checksums.push_back(model.extractor_checksum(i));
  completed_ = t;
  return report;
}

void Trainer::rebalance_memory_after_step(DeaModel& model, const TaskStream& stream,
                                          ExemplarMemory& memory, int t) {
  const std::vector<int>& new_classes = stream.class_batches[static_cast<size_t>(t - 1)];
  std::map<int, ExemplarMemory::ClassCandidates> candidates;
  NoGrad guard;
  const Extractor& newest = model.extractor(model.num_extractors() - 1);
  for (int id : stream.sample_index[static_cast<size_t>(t - 1)]) {
    const DataItem& item = *train_by_id_.at(id);
    Tensor pooled = global_avg_pool(newest.forward(image_tensor(item)));
    auto& bucket = candidates[item.label];
    bucket.ids.push_back(id);
    bucket.features.push_back(pooled.data());
  }
  memory.rebalance(new_classes, candidates);
}

EpochStats Trainer::run_epoch_finetune(std::vector<TrainSample>& samples, Sgd& opt, int t,
                                       int epoch, double lr) {
  opt.set_lr(lr);
  std::mt19937_64 shuffle_rng(
      mix_seed(static_cast<uint64_t>(config_.seed), 0x100000ull + 1009ull * t + epoch));
  std::shuffle(samples.begin(), samples.end(), shuffle_rng);
  std::mt19937_64 aug_rng(
      mix_seed(static_cast<uint64_t>(config_.seed), 0x200000ull + 1009ull * t + epoch));

  int batch = config_.batch_size;
  LossBundle sums;
  int batches = 0;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch)) {
    size_t end = std::min(samples.size(), start + static_cast<size_t>(batch));
    opt.zero_grad();
    BatchLossTerms terms;
    terms.batch_size = static_cast<int>(end - start);
    for (size_t i = start; i < end; ++i) {
      const TrainSample& s = samples[i];
      const DataItem& item = *train_by_id_.at(s.id);
      Tensor image;
      if (config_.augmentation.any()) {
        image = Tensor::from({dataset_.channels, dataset_.image_size, dataset_.image_size},
                             augment(item.image, dataset_.channels, dataset_.image_size,
                                     config_.augmentation, aug_rng));
      } else {
        image = image_tensor(item);
      }
      Tensor pooled = global_avg_pool(finetune_->extractor.forward(image));
      Tensor logits = finetune_->classifier.forward(pooled);
      acc(terms.clf_sum, classification_loss(logits, class_to_index_.at(s.label)));
    }
    KdConfig ce_only;
    ce_only.lambda = 0.0;
    ce_only.mu = 0.0;
    TotalLoss loss = total_loss(terms, ce_only);
    backward(loss.value);
    opt.step();
    sums += loss.bundle;
    log_iteration(t, epoch, batches, loss.bundle);
    ++batches;
  }
  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr;
  stats.mean = batches ? scaled(sums, 1.0 / batches) : LossBundle{};
  return stats;
}

StepReport Trainer::run_step_finetune(const TaskStream& stream, int t) {
  if (t != completed_ + 1)
    throw state_error("run_step: step " + std::to_string(t) + " invoked after " +
                      std::to_string(completed_) + " completed steps");
  const std::vector<int>& classes_t = stream.class_batches[static_cast<size_t>(t - 1)];
  ExtractorConfig arch;
  arch.in_channels = dataset_.channels;
  arch.image_size = dataset_.image_size;
  arch.channels = config_.model.channels;
  std::mt19937_64 rng(mix_seed(static_cast<uint64_t>(config_.seed), 0x400000ull + t));
  if (t == 1) {
    finetune_ = FinetuneNet{Extractor(arch, rng),
                            GrowingClassifier(static_cast<int>(classes_t.size()),
                                              arch.feature_channels(), rng)};
  } else {
    finetune_->classifier = finetune_->classifier.grown(static_cast<int>(classes_t.size()),
                                                        finetune_->classifier.feature_dim(), rng);
  }
  rebuild_class_index(t);

  std::vector<TrainSample> samples;
  for (int id : stream.sample_index[static_cast<size_t>(t - 1)]) {
    const DataItem* item = train_by_id_.at(id);
    samples.push_back({id, item->label, t, false});
  }

  std::vector<Tensor> params = finetune_->extractor.parameters();
  auto clf = finetune_->classifier.parameters();
  params.insert(params.end(), clf.begin(), clf.end());
  Sgd opt(params, {config_.optimizer.lr, config_.optimizer.momentum,
                   config_.optimizer.weight_decay});

  StepReport report;
  report.step = t;
  for (int epoch = 0; epoch < config_.schedule.epochs_per_step; ++epoch) {
    double lr = lr_at_epoch(config_.schedule, config_.optimizer.lr, epoch);
    report.epochs.push_back(run_epoch_finetune(samples, opt, t, epoch, lr));
  }
  if (!report.epochs.empty()) report.final_bundle = report.epochs.back().mean;
  report.param_count =
      parameter_count(finetune_->extractor.parameters()) +
      parameter_count(finetune_->classifier.parameters());
  completed_ = t;
  return report;
}

std::vector<double> Trainer::eval_logits(const DataItem& item) const {
  NoGrad guard;
  if (config_.method == "finetune") {
    Tensor pooled = global_avg_pool(finetune_->extractor.forward(image_tensor(item)));
    return finetune_->classifier.forward(pooled).data();
  }
  return model_.forward(image_tensor(item), false);
}

StepEval Trainer::evaluate(int t) {
  std::set<int> seen;
  for (int c : stream_.seen_classes(t)) seen.insert(c);

  StepEval eval;
  eval.step = t;
  long long correct = 0, correct5 = 0, total = 0;
  bool rescored = config_.method == "tcil" && config_.rescore && t >= 2;

  for (const DataItem& item : dataset_.test) {
    if (!seen.count(item.label)) continue;
    std::vector<double> raw = eval_logits(item);
    std::vector<double> primary = raw;
    if (rescored) primary = rescore_logits(*model_.rescore_state(), raw);

    int pred_primary = index_to_class_[static_cast<size_t>(argmax_index(primary))];
    int pred_raw = index_to_class_[static_cast<size_t>(argmax_index(raw))];
    eval.records.push_back({item.id, item.label, pred_primary, t});
    eval.records_norescore.push_back({item.id, item.label, pred_raw, t});

    ++total;
    if (pred_primary == item.label) ++correct;
    if (in_top5(primary, class_to_index_.at(item.label))) ++correct5;
  }
  if (total == 0) throw input_error("evaluate: no test samples for the seen classes");
  eval.top1 = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
  eval.top5 = 100.0 * static_cast<double>(correct5) / static_cast<double>(total);
  return eval;
}

std::string Trainer::dataset_descriptor() const {
  if (config_.dataset.name == "synthetic") {
    const SyntheticSpec& s = config_.dataset.synthetic;
    return "synthetic(classes=" + std::to_string(s.classes) +
           ",train_per_class=" + std::to_string(s.train_per_class) +
           ",image_size=" + std::to_string(s.image_size) + ")";
  }
  return config_.dataset.name + "@" + config_.dataset.root;
}

void Trainer::log_iteration(int step, int epoch, int iter, const LossBundle& bundle) {
  if (!runlog_.is_open()) return;
  nlohmann::json j{{"type", "iter"},     {"step", step},
                   {"epoch", epoch},     {"iter", iter},
                   {"clf", bundle.clf},  {"feat_kd", bundle.feat_kd},
                   {"logit_kd", bundle.logit_kd}, {"div", bundle.div},
                   {"total", bundle.total}};
  runlog_ << j.dump() << "\n";
}

void Trainer::persist_step(int t, const StepReport& report, const StepEval& eval) {
  if (out_dir_.empty()) return;
  std::string step_tag = "step_" + std::to_string(t);

  if (config_.method == "tcil") {
    std::string ckpt = out_dir_ + "/checkpoints/" + step_tag + ".ckpt";
    save_checkpoint(model_, ckpt);
    manifest_.artifacts["checkpoint_" + step_tag] = ckpt;
    std::string mem = out_dir_ + "/memory/" + step_tag + ".json";
    memory_.save_snapshot(mem);
    manifest_.artifacts["memory_" + step_tag] = mem;
  }

  std::string pred = out_dir_ + "/predictions/" + step_tag + ".csv";
  save_prediction_log(pred, eval.records);
  manifest_.artifacts["predictions_" + step_tag] = pred;
  std::string pred_raw = out_dir_ + "/predictions/" + step_tag + "_norescore.csv";
  save_prediction_log(pred_raw, eval.records_norescore);
  manifest_.artifacts["predictions_norescore_" + step_tag] = pred_raw;

  if (runlog_.is_open()) {
    nlohmann::json j{{"type", "step"},
                     {"step", t},
                     {"top1", eval.top1},
                     {"top5", eval.top5},
                     {"clf", report.final_bundle.clf},
                     {"total", report.final_bundle.total}};
    runlog_ << j.dump() << "\n";
    runlog_.flush();
  }

  manifest_.eval_summaries.push_back({t, eval.top1, eval.top5});
  manifest_.mark_completed(t);
  manifest_.save(out_dir_ + "/run_manifest.json");
}

ExperimentResult Trainer::run_experiment(bool resume) {
  ExperimentResult result;
  result.class_to_task = stream_.class_to_task();

  int start_step = 0;
  if (!out_dir_.empty()) {
    fs::create_directories(out_dir_);
    fs::create_directories(out_dir_ + "/checkpoints");
    fs::create_directories(out_dir_ + "/memory");
    fs::create_directories(out_dir_ + "/predictions");
    std::string manifest_path = out_dir_ + "/run_manifest.json";

    if (resume) {
      if (!fs::exists(manifest_path))
        throw resume_error("no run manifest under " + out_dir_);
      manifest_ = RunManifest::load(manifest_path);
      if (manifest_.config_hash != config_.hash()) {
        nlohmann::json stored;
        std::ifstream in(out_dir_ + "/config.json");
        if (in) in >> stored;
        auto diff = json_diff_paths(stored, config_.to_json());
        std::string paths;
        for (const auto& p : diff) paths += (paths.empty() ? "" : ", ") + p;
        throw resume_error("config does not match the original run; differing keys: " +
                           (paths.empty() ? std::string("<unknown>") : paths));
      }
      if (config_.method == "finetune")
        throw resume_error("resume is not supported for method 'finetune'");
      start_step = manifest_.last_completed();
      if (start_step >= 1) {
        model_ = load_checkpoint(out_dir_ + "/checkpoints/step_" + std::to_string(start_step) +
                                 ".ckpt");
        memory_ = ExemplarMemory::load_snapshot(out_dir_ + "/memory/step_" +
                                                std::to_string(start_step) + ".json");
        completed_ = start_step;
        for (int t = 1; t <= start_step; ++t) {
          StepEval eval;
          eval.step = t;
          PredictionLog log = load_prediction_log(
              out_dir_ + "/predictions/step_" + std::to_string(t) + ".csv",
              out_dir_ + "/class_task_map.csv");
          eval.records = log.records;
          PredictionLog raw = load_prediction_log(
              out_dir_ + "/predictions/step_" + std::to_string(t) + "_norescore.csv",
              out_dir_ + "/class_task_map.csv");
          eval.records_norescore = raw.records;
          for (const auto& s : manifest_.eval_summaries)
            if (s.step == t) {
              eval.top1 = s.top1;
              eval.top5 = s.top5;
            }
          result.evals.push_back(std::move(eval));
        }
        rebuild_class_index(start_step);
      }
    } else {
      if (fs::exists(manifest_path))
        throw io_error(out_dir_ + " already holds a run; use --resume or a clean directory");
      std::ofstream cfg(out_dir_ + "/config.json");
      cfg << config_.to_json().dump(2) << "\n";
      manifest_.config_hash = config_.hash();
      manifest_.dataset_descriptor = dataset_descriptor();
      manifest_.protocol = config_.protocol;
      manifest_.seed = config_.seed;
      manifest_.method = config_.method;
      manifest_.total_steps = stream_.num_steps;
      manifest_.save(manifest_path);
      save_class_task_map(out_dir_ + "/class_task_map.csv", stream_.class_to_task());
    }
    runlog_.open(out_dir_ + "/runlog.jsonl", std::ios::app);
  }

  if (start_step == 0 && config_.method == "tcil") {
    ExtractorConfig arch;
    arch.in_channels = dataset_.channels;
    arch.image_size = dataset_.image_size;
    arch.channels = config_.model.channels;
    model_ = DeaModel(arch, static_cast<int>(stream_.class_batches[0].size()),
                      config_.model.reduction, static_cast<uint64_t>(config_.seed));
    model_.set_step_class_ids({stream_.class_batches[0]});
  }

  for (int t = start_step + 1; t <= stream_.num_steps; ++t) {
    StepReport report = config_.method == "finetune"
                            ? run_step_finetune(stream_, t)
                            : run_step(model_, stream_, memory_, t);
    StepEval eval = evaluate(t);
    persist_step(t, report, eval);
    result.reports.push_back(std::move(report));
    result.evals.push_back(std::move(eval));
  }

  PredictionLog primary, raw;
  primary.class_to_task = result.class_to_task;
  raw.class_to_task = result.class_to_task;
  for (const StepEval& e : result.evals) {
    primary.records.insert(primary.records.end(), e.records.begin(), e.records.end());
    raw.records.insert(raw.records.end(), e.records_norescore.begin(),
                       e.records_norescore.end());
    result.per_step_top5.push_back(e.top5);
  }
  result.breakdown = compute_breakdown(primary);
  result.metrics = accuracy_metrics(result.breakdown);
  result.breakdown_norescore = compute_breakdown(raw);
  result.metrics_norescore = accuracy_metrics(result.breakdown_norescore);

  if (!out_dir_.empty()) {
    save_prediction_log(out_dir_ + "/predictions.csv", primary.records);
    save_prediction_log(out_dir_ + "/predictions_norescore.csv", raw.records);
    emit_report(result.breakdown, result.metrics, out_dir_ + "/report");
  }
  return result;
}

}  // namespace tcil
