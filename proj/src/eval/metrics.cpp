#include "efl/eval/metrics.hpp"

#include "efl/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace efl::eval {

using nn::Tensor;

double psnr(const Image& a, const Image& b) {
  EFL_CHECK(a.same_shape(b), Errc::shape_mismatch, "psnr: " + a.shape_str() + " vs " + b.shape_str());
  EFL_CHECK(!a.empty(), Errc::invalid_argument, "psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double perceptual_distance(const std::vector<Tensor>& acts_a, const std::vector<Tensor>& acts_b,
                           std::span<const double> layer_weights) {
  EFL_CHECK(acts_a.size() == acts_b.size(), Errc::shape_mismatch, "perceptual_distance: layer count differs");
  EFL_CHECK(layer_weights.empty() || layer_weights.size() == acts_a.size(), Errc::invalid_argument,
            "perceptual_distance: one weight per layer");
  double total = 0.0;
  for (std::size_t l = 0; l < acts_a.size(); ++l) {
    const Tensor& a = acts_a[l];
    const Tensor& b = acts_b[l];
    EFL_CHECK(a.same_shape(b), Errc::shape_mismatch, "perceptual_distance: layer shape differs");
    const int c = a.dim(0);
    const std::size_t locs = a.size() / static_cast<std::size_t>(c);
    double acc = 0.0;
    for (std::size_t p = 0; p < locs; ++p) {
      double na = 0.0, nb = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        na += a[ch * locs + p] * a[ch * locs + p];
        nb += b[ch * locs + p] * b[ch * locs + p];
      }
      na = std::sqrt(na) + 1e-10;
      nb = std::sqrt(nb) + 1e-10;
      for (int ch = 0; ch < c; ++ch) {
        const double d = a[ch * locs + p] / na - b[ch * locs + p] / nb;
        acc += d * d;
      }
    }
    const double w = layer_weights.empty() ? 1.0 : layer_weights[l];
    total += w * acc / static_cast<double>(locs);
  }
  return total;
}

double perceptual_distance(const Image& a, const Image& b, const PerceptualEncoder& encoder) {
  EFL_CHECK(a.same_shape(b), Errc::shape_mismatch, "perceptual_distance: image shapes differ");
  return perceptual_distance(encoder.activations(a), encoder.activations(b));
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void moments(const std::vector<std::vector<double>>& xs, Vec& mu, Mat& cov) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  const auto d = static_cast<Eigen::Index>(xs[0].size());
  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    EFL_CHECK(static_cast<Eigen::Index>(xs[static_cast<std::size_t>(i)].size()) == d, Errc::shape_mismatch,
              "fid: ragged feature set");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  mu = x.colwise().mean();
  const Mat c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(n - 1);
}

// Eigenvalues below a relative floor are treated as zero.
Vec clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Mat>& es) {
  Vec ev = es.eigenvalues();
  const double floor = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev(i) < floor) ev(i) = 0.0;
  return ev;
}

}  // namespace

double fid(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen) {
  EFL_CHECK(real.size() >= 2 && gen.size() >= 2, Errc::invalid_argument, "fid: need at least 2 vectors per set");
  EFL_CHECK(real[0].size() == gen[0].size(), Errc::shape_mismatch, "fid: feature dimensions differ");
  Vec mu1, mu2;
  Mat s1, s2;
  moments(real, mu1, s1);
  moments(gen, mu2, s2);
  Eigen::SelfAdjointEigenSolver<Mat> es1(s1);
  const Mat root1 = es1.eigenvectors() * clamped_eigenvalues(es1).cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();
  Mat prod = root1 * s2 * root1;
  prod = 0.5 * (prod + prod.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es2(prod, Eigen::EigenvaluesOnly);
  const double tr_root = clamped_eigenvalues(es2).cwiseSqrt().sum();
  const double v = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_root;
  EFL_CHECK(std::isfinite(v), Errc::numeric, "fid is not finite");
  return std::max(0.0, v);
}

double contrastive_score(const std::vector<double>& a, const std::vector<double>& b) {
  return 100.0 * cosine_similarity(a, b);
}

double contrastive_image_score(const Image& gen, const Image& ref, const FeatureExtractor& extractor) {
  return contrastive_score(extractor.features(gen), extractor.features(ref));
}

double egovlp_score(const Image& gen, const Image& ref, const VideoEncoder& encoder) {
  return contrastive_score(encoder.embed(egovlp_stack(gen)), encoder.embed(egovlp_stack(ref)));
}

double egovlp_plus_score(const Image& input, const Image& gen, const Image& ref_input, const Image& ref_target,
                         const VideoEncoder& encoder) {
  return contrastive_score(encoder.embed(egovlp_plus_stack(input, gen)),
                           encoder.embed(egovlp_plus_stack(ref_input, ref_target)));
}

CaptionScore caption_text_similarity(const Image& gen, const std::string& description, const NearestCaptioner& captioner,
                                     const TrigramTextEncoder& text_encoder) {
  CaptionScore s;
  s.caption = captioner.caption(gen);
  s.empty_caption = s.caption.empty();
  s.score = contrastive_score(text_encoder.encode(s.caption), text_encoder.encode(description));
  return s;
}

BinAssignment transition_time_bins(std::span<const double> deltas, int k) {
  EFL_CHECK(k >= 2, Errc::invalid_argument, "transition_time_bins: k must be >= 2");
  const auto n = static_cast<int>(deltas.size());
  EFL_CHECK(n >= k, Errc::invalid_argument,
            "transition_time_bins: " + std::to_string(n) + " values for " + std::to_string(k) + " bins");
  std::vector<double> sorted(deltas.begin(), deltas.end());
  std::sort(sorted.begin(), sorted.end());
  BinAssignment r;
  for (int j = 1; j < k; ++j) r.thresholds.push_back(sorted[static_cast<std::size_t>(j * n / k - 1)]);
  r.counts.assign(static_cast<std::size_t>(k), 0);
  for (double d : deltas) {
    const int b = static_cast<int>(std::count_if(r.thresholds.begin(), r.thresholds.end(), [d](double t) { return d > t; }));
    r.bins.push_back(b);
    ++r.counts[static_cast<std::size_t>(b)];
  }
  r.degenerate = std::any_of(r.counts.begin(), r.counts.end(), [](int c) { return c == 0; });
  return r;
}

BinAssignment transition_time_bins(std::span<const data::CuratedPair> pairs, int k) {
  std::vector<double> d;
  for (const auto& p : pairs) d.push_back(p.delta_in + p.delta_out);
  return transition_time_bins(d, k);
}

std::string StudyPackage::tasks_jsonl() const {
  std::string out;
  for (const auto& t : tasks) out += t.dump() + "\n";
  return out;
}

StudyPackage user_study_export(std::span<const StudySample> samples, int n_raters, std::uint64_t seed) {
  EFL_CHECK(n_raters >= 1, Errc::invalid_argument, "user study needs at least one rater");
  EFL_CHECK(!samples.empty(), Errc::invalid_argument, "user study needs samples");
  StudyPackage pkg;
  pkg.key = nlohmann::json::object();
  pkg.key["seed"] = seed;
  pkg.key["tasks"] = nlohmann::json::object();
  const Rng base(seed);
  int next = 0;
  for (const auto& s : samples) {
    EFL_CHECK(s.outputs.size() >= 2, Errc::invalid_argument, "user study sample " + s.key + " needs >= 2 models");
    for (int r = 0; r < n_raters; ++r) {
      std::vector<std::string> models;
      for (const auto& [m, _] : s.outputs) models.push_back(m);
      Rng rng = base.derive(s.key + "#" + std::to_string(r));
      std::shuffle(models.begin(), models.end(), rng.engine());
      char id[16];
      std::snprintf(id, sizeof(id), "t%05d", next++);
      nlohmann::json task;
      task["task_id"] = id;
      task["sample"] = s.key;
      task["rater"] = r;
      task["input"] = s.input_path;
      task["slots"] = nlohmann::json::array();
      for (const auto& m : models) task["slots"].push_back(s.outputs.at(m));
      pkg.tasks.push_back(task);
      pkg.key["tasks"][id] = models;
    }
  }
  return pkg;
}

std::map<std::string, double> aggregate_winrates(std::span<const StudyResponse> responses, const nlohmann::json& key) {
  EFL_CHECK(!responses.empty(), Errc::invalid_argument, "no study responses");
  const auto& tasks = key.at("tasks");
  std::map<std::string, double> picks;
  for (const auto& [_, models] : tasks.items())
    for (const auto& m : models) picks.emplace(m.get<std::string>(), 0.0);
  for (const auto& r : responses) {
    EFL_CHECK(tasks.contains(r.task_id), Errc::invalid_argument, "response references unknown task " + r.task_id);
    const auto& models = tasks.at(r.task_id);
    EFL_CHECK(r.picked_slot >= 0 && r.picked_slot < static_cast<int>(models.size()), Errc::invalid_argument,
              "response slot out of range for " + r.task_id);
    picks[models.at(static_cast<std::size_t>(r.picked_slot)).get<std::string>()] += 1.0;
  }
  for (auto& [_, v] : picks) v /= static_cast<double>(responses.size());
  return picks;
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

namespace {

struct Scores {
  double egovlp = 0, egovlp_plus = 0, clip = 0, psnr = 0, lpips = 0, blip_b = 0, blip_l = 0;
};

nlohmann::ordered_json summarize(const std::vector<Scores>& s, const std::vector<std::size_t>& idx,
                                 std::span<const EvalSample> samples, const EvalSuite& suite) {
  Scores m;
  for (auto i : idx) {
    m.egovlp += s[i].egovlp;
    m.egovlp_plus += s[i].egovlp_plus;
    m.clip += s[i].clip;
    m.psnr += s[i].psnr;
    m.lpips += s[i].lpips;
    m.blip_b += s[i].blip_b;
    m.blip_l += s[i].blip_l;
  }
  const double n = static_cast<double>(idx.size());
  nlohmann::ordered_json j;
  j["egovlp"] = round4(m.egovlp / n);
  j["egovlp_plus"] = round4(m.egovlp_plus / n);
  j["clip"] = round4(m.clip / n);
  if (idx.size() >= 2) {
    std::vector<std::vector<double>> real, gen;
    for (auto i : idx) {
      real.push_back(suite.perceptual.distribution_features(samples[i].target));
      gen.push_back(suite.perceptual.distribution_features(samples[i].generated));
    }
    j["fid"] = round4(fid(real, gen));
  } else {
    j["fid"] = nullptr;
  }
  j["psnr"] = round4(m.psnr / n);
  j["lpips"] = round4(m.lpips / n);
  j["blip_b"] = round4(m.blip_b / n);
  j["blip_l"] = round4(m.blip_l / n);
  return j;
}

}  // namespace

nlohmann::ordered_json metric_report(std::span<const EvalSample> samples, const EvalSuite& suite, int k_bins) {
  EFL_CHECK(!samples.empty(), Errc::invalid_argument, "metric report needs at least one sample");
  std::vector<Scores> s(samples.size());
  int empty_captions = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& e = samples[i];
    s[i].egovlp = egovlp_score(e.generated, e.target, suite.video);
    s[i].egovlp_plus = egovlp_plus_score(e.input, e.generated, e.input, e.target, suite.video);
    s[i].clip = contrastive_image_score(e.generated, e.target, suite.clip);
    s[i].psnr = psnr(e.generated, e.target);
    s[i].lpips = perceptual_distance(e.generated, e.target, suite.perceptual);
    const auto b = caption_text_similarity(e.generated, e.description, suite.blip_b, suite.text);
    const auto l = caption_text_similarity(e.generated, e.description, suite.blip_l, suite.text);
    s[i].blip_b = b.score;
    s[i].blip_l = l.score;
    empty_captions += b.empty_caption + l.empty_caption;
  }
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);

  nlohmann::ordered_json report;
  report["metrics"] = summarize(s, all, samples, suite);
  report["bins"] = nlohmann::ordered_json::array();
  const int k = std::min<int>(k_bins, static_cast<int>(samples.size()));
  if (k >= 2) {
    std::vector<double> deltas;
    for (const auto& e : samples) deltas.push_back(e.transition_time);
    const auto bins = transition_time_bins(deltas, k);
    for (int b = 0; b < k; ++b) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < samples.size(); ++i)
        if (bins.bins[i] == b) idx.push_back(i);
      nlohmann::ordered_json row;
      row["bin"] = b;
      row["upper_edge"] = b + 1 < k ? nlohmann::ordered_json(round4(bins.thresholds[static_cast<std::size_t>(b)])) : nullptr;
      row["n"] = idx.size();
      row["metrics"] = idx.empty() ? nlohmann::ordered_json(nullptr) : summarize(s, idx, samples, suite);
      report["bins"].push_back(row);
    }
    report["bins_degenerate"] = bins.degenerate;
  }
  report["empty_captions"] = empty_captions;
  report["extractor_fingerprints"] = {{"perceptual", suite.perceptual.fingerprint()},
                                      {"contrastive_image", suite.clip.fingerprint()},
                                      {"contrastive_video", suite.video.fingerprint()},
                                      {"captioner_b", suite.blip_b.fingerprint()},
                                      {"captioner_l", suite.blip_l.fingerprint()},
                                      {"text", suite.text.fingerprint()}};
  report["n"] = samples.size();
  return report;
}

}  // namespace efl::eval
