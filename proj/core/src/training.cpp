#include "tokstd/training.hpp"

#include "tokstd/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace tokstd {

namespace {

/// Floyd's algorithm: `count` distinct values from [0, n).
std::vector<std::uint32_t> sample_distinct(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::uint32_t> out;
    out.reserve(count);
    for (std::size_t j = n - count; j < n; ++j) {
        const auto r = static_cast<std::uint32_t>(rng.below(j + 1));
        if (std::find(out.begin(), out.end(), r) == out.end()) {
            out.push_back(r);
        } else {
            out.push_back(static_cast<std::uint32_t>(j));
        }
    }
    return out;
}

template <typename T>
const Matrix<T>& embeddings_of(const BatchForward<T>& fwd, const FrameRef& ref) {
    return ref.sequence == 0 ? fwd.clean[ref.item].embeddings : fwd.partner[ref.item].embeddings;
}

template <typename T>
Matrix<T> gather_pool(const BatchForward<T>& fwd, const std::vector<FrameRef>& pool) {
    const std::size_t d = fwd.clean.empty() ? 0 : fwd.clean[0].embeddings.cols();
    Matrix<T> out(pool.size(), d);
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const auto src = embeddings_of(fwd, pool[r]).row(pool[r].frame);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Matrix<double> one_hot_rows(const Matrix<double>& scores) {
    Matrix<double> out(scores.rows(), scores.cols(), 0.0);
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const auto row = scores.row(i);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        out(i, best) = 1.0;
    }
    return out;
}

template <typename T>
Matrix<T> normalised_rows(const Matrix<T>& codewords, const std::vector<std::uint32_t>& codes) {
    Matrix<T> out(codes.size(), codewords.cols());
    for (std::size_t t = 0; t < codes.size(); ++t) {
        const auto c = codewords.row(codes[t]);
        T sq = 0;
        for (T v : c) {
            sq += v * v;
        }
        const T norm = std::sqrt(sq);
        auto o = out.row(t);
        for (std::size_t j = 0; j < c.size(); ++j) {
            o[j] = c[j] / norm;
        }
    }
    return out;
}

template <typename T>
void axpy(std::span<T> dst, std::span<const T> src, T scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += scale * src[i];
    }
}

AudioClip centre_crop(const AudioClip& clip, std::size_t max_samples) {
    if (clip.samples.size() <= max_samples) {
        return clip;
    }
    const std::size_t start = (clip.samples.size() - max_samples) / 2;
    AudioClip out;
    out.sample_rate = clip.sample_rate;
    out.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(start),
                       clip.samples.begin() + static_cast<std::ptrdiff_t>(start + max_samples));
    return out;
}

} // namespace

void TrainingConfig::validate() const {
    require(tau > 0.0 && tau_prime > 0.0, ErrorKind::Parameter, "temperatures must be positive");
    require(lambda1 >= 0.0 && lambda2 >= 0.0, ErrorKind::Parameter, "loss weights must be >= 0");
    require(batch_size >= 2, ErrorKind::Parameter, "batch size must be at least 2");
    require(lr > 0.0, ErrorKind::Parameter, "learning rate must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::Parameter,
            "Adam betas must lie in [0, 1)");
    require(adam_eps > 0.0, ErrorKind::Parameter, "Adam epsilon must be positive");
    require(codebook_size >= 2, ErrorKind::Parameter, "codebook needs at least two codewords");
    require(encoder.hidden > 0 && encoder.output_dim > 0 && encoder.input_dim > 0, ErrorKind::Parameter,
            "encoder dimensions must be positive");
    require(sinkhorn.epsilon > 0.0 && sinkhorn.max_iter >= 1, ErrorKind::Parameter,
            "invalid Sinkhorn options");
}

template <typename T>
ContrastiveLoss<T> contrastive_loss(const Matrix<T>& anchors, const Matrix<T>& positives,
                                    std::span<const FramePair> pairs, const Matrix<T>& pool,
                                    std::span<const std::vector<std::uint32_t>> negatives, T tau) {
    require(tau > T(0), ErrorKind::Parameter, "tau must be positive");
    require(negatives.size() == pairs.size(), ErrorKind::Shape, "one negative list per pair required");
    const std::size_t d = anchors.cols();
    require(positives.cols() == d && (pool.rows() == 0 || pool.cols() == d), ErrorKind::Shape,
            "embedding widths differ");

    ContrastiveLoss<T> out{T(0), Matrix<T>(anchors.rows(), d, T(0)), Matrix<T>(positives.rows(), d, T(0)),
                           Matrix<T>(pool.rows(), d, T(0))};
    if (pairs.empty()) {
        return out;
    }
    const T inv_tau = T(1) / tau;
    const T weight = T(1) / static_cast<T>(pairs.size());
    std::vector<T> logits;
    T total = 0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [t, u] = pairs[p];
        require(t < anchors.rows() && u < positives.rows(), ErrorKind::Input, "pair index out of range");
        const auto z = anchors.row(t);
        const auto& neg = negatives[p];
        logits.resize(neg.size() + 1);
        logits[0] = dot<T>(z, positives.row(u)) * inv_tau;
        T max_logit = logits[0];
        for (std::size_t k = 0; k < neg.size(); ++k) {
            require(neg[k] < pool.rows(), ErrorKind::Input, "negative index out of range");
            logits[k + 1] = dot<T>(z, pool.row(neg[k])) * inv_tau;
            max_logit = std::max(max_logit, logits[k + 1]);
        }
        T sum_exp = 0;
        for (T l : logits) {
            sum_exp += std::exp(l - max_logit);
        }
        const T lse = max_logit + std::log(sum_exp);
        total += lse - logits[0];

        // d/d logit_0 = softmax_0 - 1, d/d logit_k = softmax_k.
        auto gz = out.grad_anchors.row(t);
        const T g0 = weight * inv_tau * (std::exp(logits[0] - lse) - T(1));
        axpy<T>(gz, positives.row(u), g0);
        axpy<T>(out.grad_positives.row(u), z, g0);
        for (std::size_t k = 0; k < neg.size(); ++k) {
            const T gk = weight * inv_tau * std::exp(logits[k + 1] - lse);
            axpy<T>(gz, pool.row(neg[k]), gk);
            axpy<T>(out.grad_pool.row(neg[k]), z, gk);
        }
    }
    out.loss = total * weight;
    return out;
}

template <typename T>
CommitmentLoss<T> commitment_loss(const Matrix<T>& z, const Matrix<T>& zhat, IndexRange frames) {
    require(z.rows() == zhat.rows() && z.cols() == zhat.cols(), ErrorKind::Shape,
            "commitment inputs differ in shape");
    require(frames.end <= z.rows(), ErrorKind::Input, "frame range exceeds sequence");
    CommitmentLoss<T> out{T(0), Matrix<T>(z.rows(), z.cols(), T(0))};
    if (frames.empty()) {
        return out;
    }
    const T weight = T(1) / static_cast<T>(frames.size());
    T acc = 0;
    for (std::size_t t = frames.begin; t < frames.end; ++t) {
        acc += dot<T>(z.row(t), zhat.row(t));
        axpy<T>(out.grad.row(t), zhat.row(t), -weight);
    }
    out.loss = -acc * weight;
    return out;
}

template <typename T>
BatchForward<T> forward_batch(const PairBatch& batch, const EncoderParams<T>& params) {
    BatchForward<T> fwd;
    fwd.clean_cache.resize(batch.size());
    fwd.partner_cache.resize(batch.size());
    fwd.clean.reserve(batch.size());
    fwd.partner.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        fwd.clean.push_back(encode(batch[i].clean, params, &fwd.clean_cache[i]));
        fwd.partner.push_back(encode(batch[i].partner, params, &fwd.partner_cache[i]));
    }
    return fwd;
}

template <typename T>
BatchTargets make_targets(const PairBatch& batch, const BatchForward<T>& forward,
                          const Codebook<T>& codebook, const TrainingConfig& cfg, Rng& rng) {
    BatchTargets targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::uint8_t s = 0; s < 2; ++s) {
            const IndexRange valid = s == 0 ? batch[i].clean.valid : batch[i].partner.valid;
            for (std::size_t t = valid.begin; t < valid.end; ++t) {
                targets.pool.push_back({static_cast<std::uint32_t>(i), s, static_cast<std::uint32_t>(t)});
            }
        }
    }
    require(!targets.pool.empty(), ErrorKind::EmptyInput, "batch has no valid frames");

    const Matrix<T> pooled = gather_pool(forward, targets.pool);
    const Matrix<double> scores = similarity_matrix(pooled, codebook);
    Matrix<double> plan;
    if (cfg.targets == TargetMode::OptimalTransport) {
        AssignmentPlan solved = sinkhorn_balance(scores, cfg.sinkhorn);
        targets.sinkhorn_converged = solved.converged;
        targets.sinkhorn_violation = solved.violation;
        plan = std::move(solved.probs);
    } else {
        plan = one_hot_rows(scores);
    }

    const std::size_t k = codebook.size();
    targets.assignment_counts.assign(k, 0);
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const auto row = scores.row(r);
        ++targets.assignment_counts[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())];
    }

    targets.items.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto& it = targets.items[i];
        it.clean_plan = Matrix<double>(batch[i].clean.length(), k, 0.0);
        it.partner_plan = Matrix<double>(batch[i].partner.length(), k, 0.0);
        it.clean_codes = nearest_codewords(forward.clean[i].embeddings, codebook);
        it.partner_codes = nearest_codewords(forward.partner[i].embeddings, codebook);
        it.pairs = anchor_positive_pairs(batch[i].path);
    }
    for (std::size_t r = 0; r < targets.pool.size(); ++r) {
        const FrameRef& ref = targets.pool[r];
        auto& it = targets.items[ref.item];
        auto dst = ref.sequence == 0 ? it.clean_plan.row(ref.frame) : it.partner_plan.row(ref.frame);
        const auto src = plan.row(r);
        std::copy(src.begin(), src.end(), dst.begin());
    }

    // Negatives come from frames of items with a different label.
    std::map<std::uint32_t, std::vector<std::uint32_t>> others;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::uint32_t label = batch[i].label;
        if (others.contains(label)) {
            continue;
        }
        auto& list = others[label];
        for (std::size_t r = 0; r < targets.pool.size(); ++r) {
            if (batch[targets.pool[r].item].label != label) {
                list.push_back(static_cast<std::uint32_t>(r));
            }
        }
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto& it = targets.items[i];
        const auto& candidates = others[batch[i].label];
        it.negatives.resize(it.pairs.size());
        if (cfg.k_neg == 0) {
            continue;
        }
        require(!candidates.empty(), ErrorKind::Sampling,
                "no negatives available: every batch item shares label " + std::to_string(batch[i].label));
        const std::size_t count = std::min(cfg.k_neg, candidates.size());
        for (auto& neg : it.negatives) {
            const auto picks = sample_distinct(candidates.size(), count, rng);
            neg.resize(count);
            for (std::size_t k2 = 0; k2 < count; ++k2) {
                neg[k2] = candidates[picks[k2]];
            }
        }
    }
    return targets;
}

template <typename T>
BatchLoss<T> batch_loss(const PairBatch& batch, const BatchForward<T>& forward,
                        const EncoderParams<T>& params, const Matrix<T>& codewords,
                        const BatchTargets& targets, const TrainingConfig& cfg) {
    require(targets.items.size() == batch.size(), ErrorKind::Shape, "targets do not match batch");
    const std::size_t b = batch.size();
    const T scale = T(1) / static_cast<T>(b);
    const T lambda1 = static_cast<T>(cfg.lambda1);
    const T lambda2 = static_cast<T>(cfg.lambda2);
    const std::size_t d = codewords.cols();

    BatchLoss<T> out;
    out.grad_params.assign(params.values.size(), T(0));
    out.grad_codewords = Matrix<T>(codewords.rows(), d, T(0));

    const Matrix<T> pool = gather_pool(forward, targets.pool);
    std::vector<Matrix<T>> grad_clean(b);
    std::vector<Matrix<T>> grad_partner(b);
    for (std::size_t i = 0; i < b; ++i) {
        grad_clean[i] = Matrix<T>(forward.clean[i].length(), d, T(0));
        grad_partner[i] = Matrix<T>(forward.partner[i].length(), d, T(0));
    }

    for (std::size_t i = 0; i < b; ++i) {
        const auto& it = targets.items[i];
        const Matrix<T>& zc = forward.clean[i].embeddings;
        const Matrix<T>& zp = forward.partner[i].embeddings;

        const auto con = contrastive_loss<T>(zc, zp, it.pairs, pool, it.negatives, static_cast<T>(cfg.tau));
        out.contrastive += scale * con.loss;
        axpy<T>(grad_clean[i].flat(), con.grad_anchors.flat(), scale);
        axpy<T>(grad_partner[i].flat(), con.grad_positives.flat(), scale);
        for (std::size_t r = 0; r < targets.pool.size(); ++r) {
            const FrameRef& ref = targets.pool[r];
            auto dst = ref.sequence == 0 ? grad_clean[ref.item].row(ref.frame) : grad_partner[ref.item].row(ref.frame);
            axpy<T>(dst, con.grad_pool.row(r), scale);
        }

        if (cfg.lambda1 > 0.0) {
            const auto rob = robust_consistency_loss<T>(zc, zp, it.pairs, it.clean_plan.template cast<T>(),
                                                        it.partner_plan.template cast<T>(), codewords,
                                                        static_cast<T>(cfg.tau_prime));
            out.robust += scale * rob.loss;
            axpy<T>(grad_clean[i].flat(), rob.grad_a.flat(), scale * lambda1);
            axpy<T>(grad_partner[i].flat(), rob.grad_b.flat(), scale * lambda1);
            axpy<T>(out.grad_codewords.flat(), rob.grad_codewords.flat(), scale * lambda1);
        }

        if (cfg.lambda2 > 0.0) {
            const auto com_c = commitment_loss<T>(zc, normalised_rows(codewords, it.clean_codes), batch[i].clean.valid);
            const auto com_p =
                commitment_loss<T>(zp, normalised_rows(codewords, it.partner_codes), batch[i].partner.valid);
            out.commitment += scale * T(0.5) * (com_c.loss + com_p.loss);
            axpy<T>(grad_clean[i].flat(), com_c.grad.flat(), scale * lambda2 * T(0.5));
            axpy<T>(grad_partner[i].flat(), com_p.grad.flat(), scale * lambda2 * T(0.5));
        }
    }
    out.total = out.contrastive + lambda1 * out.robust + lambda2 * out.commitment;

    for (std::size_t i = 0; i < b; ++i) {
        const auto gc = encode_backward(forward.clean_cache[i], params, grad_clean[i]);
        const auto gp = encode_backward(forward.partner_cache[i], params, grad_partner[i]);
        for (std::size_t j = 0; j < out.grad_params.size(); ++j) {
            out.grad_params[j] += gc.params[j] + gp.params[j];
        }
    }
    return out;
}

template <typename T>
BatchLoss<T> total_loss(const PairBatch& batch, const EncoderParams<T>& params, const Matrix<T>& codewords,
                        const BatchTargets& targets, const TrainingConfig& cfg) {
    const auto fwd = forward_batch(batch, params);
    return batch_loss(batch, fwd, params, codewords, targets, cfg);
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads) {
    require(params.size() == m_.size() && grads.size() == m_.size(), ErrorKind::Shape,
            "Adam state size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

std::vector<std::vector<std::size_t>> group_by_term(std::span<const std::string> terms) {
    std::map<std::string, std::size_t> index;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        auto [pos, inserted] = index.try_emplace(terms[i], groups.size());
        if (inserted) {
            groups.emplace_back();
        }
        groups[pos->second].push_back(i);
    }
    const auto eligible = std::count_if(groups.begin(), groups.end(), [](const auto& g) { return g.size() >= 2; });
    require(eligible >= 2, ErrorKind::Sampling,
            "need at least two terms with two or more utterances to form pairs and negatives");
    return groups;
}

std::vector<PairChoice> choose_pairs(const std::vector<std::vector<std::size_t>>& by_term,
                                     std::span<const std::string> speakers,
                                     std::span<const std::size_t> lengths, std::size_t batch_size,
                                     Rng& rng) {
    std::vector<std::uint32_t> eligible;
    for (std::size_t g = 0; g < by_term.size(); ++g) {
        if (by_term[g].size() >= 2) {
            eligible.push_back(static_cast<std::uint32_t>(g));
        }
    }
    require(eligible.size() >= 2, ErrorKind::Sampling, "need at least two pairable terms");

    std::vector<PairChoice> out;
    out.reserve(batch_size);
    std::vector<std::uint32_t> order;
    for (std::size_t b = 0; b < batch_size; ++b) {
        if (b % eligible.size() == 0) {
            order = eligible;
            rng.shuffle(order.begin(), order.end());
        }
        const std::uint32_t label = order[b % eligible.size()];
        const auto& members = by_term[label];
        const std::size_t anchor = members[rng.below(members.size())];

        std::vector<std::size_t> candidates;
        const bool have_speakers = !speakers.empty() && !speakers[anchor].empty();
        if (have_speakers) {
            for (auto m : members) {
                if (m != anchor && !speakers[m].empty() && speakers[m] != speakers[anchor]) {
                    candidates.push_back(m);
                }
            }
        }
        if (candidates.empty()) {
            for (auto m : members) {
                if (m != anchor) {
                    candidates.push_back(m);
                }
            }
        }
        std::size_t partner = candidates[rng.below(candidates.size())];
        std::size_t first = anchor;
        if (lengths[first] > lengths[partner]) {
            std::swap(first, partner);
        }
        out.push_back({label, first, partner});
    }
    return out;
}

AudioPairSource::AudioPairSource(std::vector<LabeledClip> clips, FeatureConfig features, double pad_seconds,
                                 std::optional<AugmentSpec> augment, DtwOptions dtw, bool distort_both)
    : clips_(std::move(clips)),
      features_(features),
      pad_seconds_(pad_seconds),
      augment_(std::move(augment)),
      dtw_(dtw),
      distort_both_(distort_both) {
    features_.validate();
    require(pad_seconds_ > 0.0, ErrorKind::Parameter, "pad length must be positive");
    if (augment_) {
        augment_->validate();
    }
    std::vector<std::string> terms;
    for (auto& c : clips_) {
        validate(c.audio);
        if (c.audio.sample_rate != features_.sample_rate) {
            c.audio = decimate(c.audio, features_.sample_rate);
        }
        terms.push_back(c.term);
    }
    by_term_ = group_by_term(terms);
}

PairBatch AudioPairSource::next_batch(std::size_t batch_size, Rng& rng) {
    std::vector<std::string> speakers;
    std::vector<std::size_t> lengths;
    for (const auto& c : clips_) {
        speakers.push_back(c.speaker);
        lengths.push_back(c.audio.samples.size());
    }
    const auto choices = choose_pairs(by_term_, speakers, lengths, batch_size, rng);
    const auto max_samples = static_cast<std::size_t>(std::llround(pad_seconds_ * features_.sample_rate));

    auto featurise = [&](const AudioClip& clip, IndexRange valid_samples) {
        FeatureSequence seq = compute_mfcc(clip, features_);
        seq.valid = frames_for_samples(valid_samples, seq.length(), features_);
        return seq;
    };

    PairBatch batch;
    batch.reserve(choices.size());
    for (const auto& choice : choices) {
        const PaddedClip anchor =
            pad_to_fixed(centre_crop(clips_[choice.anchor].audio, max_samples), std::nullopt, pad_seconds_);
        const PaddedClip partner =
            pad_to_fixed(centre_crop(clips_[choice.partner].audio, max_samples), std::nullopt, pad_seconds_);

        PairItem item;
        item.label = choice.label;
        const FeatureSequence anchor_clean = featurise(anchor.clip, anchor.valid);
        const FeatureSequence partner_clean = featurise(partner.clip, partner.valid);
        item.path = dtw_align(anchor_clean, partner_clean, dtw_);
        if (augment_) {
            item.partner = featurise(sample_distortion(partner.clip, *augment_, partner.valid, ordinal_++).audio,
                                     partner.valid);
            item.clean = distort_both_
                             ? featurise(sample_distortion(anchor.clip, *augment_, anchor.valid, ordinal_++).audio,
                                         anchor.valid)
                             : anchor_clean;
        } else {
            item.partner = partner_clean;
            item.clean = anchor_clean;
        }
        item.clean.source_id = clips_[choice.anchor].term;
        item.partner.source_id = clips_[choice.partner].term;
        batch.push_back(std::move(item));
    }
    return batch;
}

FeaturePairSource::FeaturePairSource(std::vector<LabeledFeatures> items, DtwOptions dtw)
    : items_(std::move(items)), dtw_(dtw) {
    std::vector<std::string> terms;
    for (const auto& it : items_) {
        terms.push_back(it.term);
    }
    by_term_ = group_by_term(terms);
    for (const auto& it : items_) {
        require(it.features.dim() == items_.front().features.dim(), ErrorKind::Shape,
                "feature dimensions differ across the dataset");
    }
}

std::size_t FeaturePairSource::input_dim() const { return items_.front().features.dim(); }

PairBatch FeaturePairSource::next_batch(std::size_t batch_size, Rng& rng) {
    std::vector<std::string> speakers;
    std::vector<std::size_t> lengths;
    for (const auto& it : items_) {
        speakers.push_back(it.speaker);
        lengths.push_back(it.features.valid.size());
    }
    const auto choices = choose_pairs(by_term_, speakers, lengths, batch_size, rng);
    PairBatch batch;
    for (const auto& choice : choices) {
        PairItem item;
        item.label = choice.label;
        item.clean = items_[choice.anchor].features;
        item.partner = items_[choice.partner].features;
        item.path = dtw_align(item.clean, item.partner, dtw_);
        batch.push_back(std::move(item));
    }
    return batch;
}

std::string metrics_csv_header() { return "step,l_contrast,l_robust,l_commit,total,entropy,sinkhorn_converged"; }

std::string metrics_csv_row(const StepMetrics& m) {
    std::ostringstream os;
    os << std::setprecision(9) << m.step << ',' << m.contrastive << ',' << m.robust << ',' << m.commitment << ','
       << m.total << ',' << m.entropy << ',' << (m.sinkhorn_converged ? 1 : 0);
    return os.str();
}

TrainResult train(const TrainingConfig& cfg_in, PairSource& source,
                  const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const StepMetrics&)>& on_step) {
    TrainingConfig cfg = cfg_in;
    cfg.validate();
    require(cfg.encoder.input_dim == source.input_dim(), ErrorKind::Config,
            "encoder input_dim " + std::to_string(cfg.encoder.input_dim) + " does not match features (" +
                std::to_string(source.input_dim()) + ")");

    TrainResult result;
    result.encoder = init_encoder<double>(cfg.encoder, derive_seed(cfg.seed, {1}));
    Rng batch_rng(derive_seed(cfg.seed, {3}));
    Rng negative_rng(derive_seed(cfg.seed, {4}));

    if (cfg.codebook_init == CodebookInit::KMeans) {
        Rng init_rng(derive_seed(cfg.seed, {5}));
        const PairBatch first = source.next_batch(cfg.batch_size, init_rng);
        std::vector<float> rows;
        std::size_t count = 0;
        for (const auto& item : first) {
            for (const auto* seq : {&item.clean, &item.partner}) {
                const auto z = encode(*seq, result.encoder);
                for (std::size_t t = z.valid.begin; t < z.valid.end; ++t) {
                    for (double v : z.embeddings.row(t)) {
                        rows.push_back(static_cast<float>(v));
                    }
                    ++count;
                }
            }
        }
        const Matrix<double> emb = Matrix<float>(count, cfg.encoder.output_dim, rows).cast<double>();
        result.codebook = init_codebook_kmeans<double>(emb, cfg.codebook_size, derive_seed(cfg.seed, {2}));
    } else {
        result.codebook = init_codebook_random<double>(cfg.codebook_size, cfg.encoder.output_dim,
                                                       derive_seed(cfg.seed, {2}));
    }

    Adam encoder_opt(result.encoder.size(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Adam codebook_opt(result.codebook.codewords.size(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    std::ofstream csv;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        csv.open(*out_dir / "metrics.csv");
        require(csv.good(), ErrorKind::Io, "cannot write metrics.csv");
        csv << metrics_csv_header() << '\n';
    }

    CheckpointInfo info;
    info.hyperparameters = {{"tau", cfg.tau},       {"tau_prime", cfg.tau_prime},
                            {"lambda1", cfg.lambda1}, {"lambda2", cfg.lambda2},
                            {"lr", cfg.lr},          {"batch_size", static_cast<double>(cfg.batch_size)},
                            {"k_neg", static_cast<double>(cfg.k_neg)}};
    auto save_all = [&](const std::filesystem::path& dir, std::uint64_t step) {
        std::filesystem::create_directories(dir);
        info.step = step;
        save_encoder(dir / "encoder", result.encoder, info);
        save_codebook(dir / "codebook", result.codebook, step);
        std::ofstream usage(dir / "usage.json");
        usage << usage_report_json(result.codebook.usage) << '\n';
    };

    auto all_finite = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    auto numeric_failure = [&](const StepMetrics& m, double violation, const std::string& what) {
        if (out_dir) {
            nlohmann::json dump = {{"step", m.step},
                                   {"what", what},
                                   {"l_contrast", m.contrastive},
                                   {"l_robust", m.robust},
                                   {"l_commit", m.commitment},
                                   {"total", m.total},
                                   {"sinkhorn_converged", m.sinkhorn_converged},
                                   {"sinkhorn_violation", violation}};
            std::ofstream(*out_dir / "nan_dump.json") << dump.dump(2) << '\n';
        }
        fail(ErrorKind::Numeric, what + " at step " + std::to_string(m.step));
    };

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        StepMetrics m;
        m.step = step;
        const PairBatch batch = source.next_batch(cfg.batch_size, batch_rng);
        const auto fwd = forward_batch(batch, result.encoder);
        BatchTargets targets;
        try {
            targets = make_targets(batch, fwd, result.codebook, cfg, negative_rng);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::DegenerateCodeword || step == 1) {
                throw;
            }
            numeric_failure(m, 0.0, std::string("codebook diverged (") + e.what() + ")");
        }
        const BatchLoss<double> loss =
            batch_loss(batch, fwd, result.encoder, result.codebook.codewords, targets, cfg);

        m.contrastive = loss.contrastive;
        m.robust = loss.robust;
        m.commitment = loss.commitment;
        m.total = loss.total;
        m.entropy = normalized_entropy(targets.assignment_counts);
        m.sinkhorn_converged = targets.sinkhorn_converged;

        if (!std::isfinite(loss.total) || !all_finite(loss.grad_params) || !all_finite(loss.grad_codewords.flat())) {
            numeric_failure(m, targets.sinkhorn_violation, "non-finite loss or gradient");
        }
        encoder_opt.step(result.encoder.values, loss.grad_params);
        codebook_opt.step(result.codebook.codewords.flat(), loss.grad_codewords.flat());
        if (!all_finite(result.encoder.values) || !all_finite(result.codebook.codewords.flat())) {
            numeric_failure(m, targets.sinkhorn_violation, "non-finite parameters");
        }
        for (std::size_t k = 0; k < result.codebook.usage.size(); ++k) {
            result.codebook.usage[k] += targets.assignment_counts[k];
        }

        result.metrics.push_back(m);
        if (csv.is_open()) {
            csv << metrics_csv_row(m) << '\n';
        }
        if (on_step) {
            on_step(m);
        }
        if (out_dir && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_all(*out_dir / ("ckpt_" + std::to_string(step)), step);
        }
    }
    if (out_dir) {
        save_all(*out_dir, cfg.steps);
    }
    return result;
}

#define TOKSTD_INSTANTIATE(T)                                                                                 \
    template ContrastiveLoss<T> contrastive_loss<T>(const Matrix<T>&, const Matrix<T>&,                       \
                                                    std::span<const FramePair>, const Matrix<T>&,             \
                                                    std::span<const std::vector<std::uint32_t>>, T);          \
    template CommitmentLoss<T> commitment_loss<T>(const Matrix<T>&, const Matrix<T>&, IndexRange);            \
    template BatchForward<T> forward_batch<T>(const PairBatch&, const EncoderParams<T>&);                     \
    template BatchTargets make_targets<T>(const PairBatch&, const BatchForward<T>&, const Codebook<T>&,       \
                                          const TrainingConfig&, Rng&);                                       \
    template BatchLoss<T> batch_loss<T>(const PairBatch&, const BatchForward<T>&, const EncoderParams<T>&,    \
                                        const Matrix<T>&, const BatchTargets&, const TrainingConfig&);        \
    template BatchLoss<T> total_loss<T>(const PairBatch&, const EncoderParams<T>&, const Matrix<T>&,          \
                                        const BatchTargets&, const TrainingConfig&);

TOKSTD_INSTANTIATE(float)
TOKSTD_INSTANTIATE(double)
#undef TOKSTD_INSTANTIATE

} // namespace tokstd
