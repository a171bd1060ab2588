#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "gbnet/abem.hpp"
#include "gbnet/data.hpp"

namespace gbnet {

struct ModelConfig {
    std::int64_t classes = 6;
    std::int64_t points = 256;
    std::int64_t k = 20;
    std::int64_t ratio = 4;
    int descriptor_form = 6;
    std::vector<std::int64_t> scales = {64, 64, 128, 256};
    double dropout = 0.5;
    bool use_prominent = true;
    bool use_fine_grained = true;
};

struct TrainConfig {
    std::int64_t epochs = 50;
    std::int64_t batch_size = 16;
    double lr_max = 0.1;
    double lr_min = 0.001;
    double momentum = 0.9;
    double clip_norm = 0;  // joint gradient norm limit, 0 disables
    std::uint64_t seed = 1;
    bool augment = true;
    std::pair<double, double> scale_range = {2.0 / 3.0, 1.5};
    std::pair<double, double> translate_range = {-0.2, 0.2};
};

// Four chained edge blocks over a geometric point descriptor, their skip
// outputs fused into one wide per-point code, pooled twice across the cloud,
// then a small FC head.
template <typename S>
struct GbnetModel {
    ModelConfig cfg;
    std::vector<AbemLayer<S>> blocks;
    MlpLayer<S> fuse;
    CaaLayer<S> fuse_attn;
    MlpLayer<S> fc1;
    MlpLayer<S> fc2;
    MlpLayer<S> fc_out;
    Pcg32 dropout_rng;
    Mode mode = Mode::train;
    std::int64_t d_desc = 0;

    void init(const ModelConfig& config, std::uint64_t seed) {
        cfg = config;
        if (cfg.classes < 2) throw ValueError("model: need at least 2 classes");
        if (cfg.points <= cfg.k)
            throw ValueError("model: need points > k, got points = " +
                             std::to_string(cfg.points) + ", k = " + std::to_string(cfg.k));
        if (cfg.scales.empty()) throw ValueError("model: need at least one scale");
        d_desc = descriptor_length(cfg.descriptor_form);

        Pcg32 rng(seed, rng_stream::kInit);
        dropout_rng = Pcg32(seed, rng_stream::kDropout);

        blocks.assign(cfg.scales.size(), {});
        std::int64_t d_in = d_desc;
        std::int64_t fuse_in = 0;
        for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
            blocks[i].init(d_in, cfg.scales[i], cfg.k, cfg.points, cfg.ratio, cfg.use_prominent,
                           cfg.use_fine_grained, rng);
            fuse_in += blocks[i].out_width();
            d_in = cfg.scales[i];
        }
        fuse.init(fuse_in, fuse_in, rng);
        fuse_attn.init(cfg.points, cfg.ratio, rng);
        fc1.init(2 * fuse_in, 512, rng);
        fc2.init(512, 256, rng);
        fc_out.init(256, cfg.classes, rng);
        fc_out.use_bn = false;
        fc_out.activation.kind = Activation::identity;
        // damp the head so initial logits sit near zero and the starting
        // loss lands at ln(classes)
        for (auto& w : fc_out.weight.data()) w *= S(0.05);
    }

    std::int64_t fuse_width() const { return fuse.c_out(); }

    void set_mode(Mode m) {
        mode = m;
        for (auto& b : blocks) b.set_mode(m);
        fuse.bn.mode = m;
        fuse_attn.set_mode(m);
        fc1.bn.mode = m;
        fc2.bn.mode = m;
    }

    void collect(std::vector<Param<S>>& params) {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(params, "block" + std::to_string(i + 1));
        fuse.collect(params, "fuse");
        fuse_attn.collect(params, "fuse_attn");
        fc1.collect(params, "fc1");
        fc2.collect(params, "fc2");
        fc_out.collect(params, "fc_out");
    }

    void collect_buffers(std::vector<Param<S>>& bufs) {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_buffers(bufs, "block" + std::to_string(i + 1));
        fuse.collect_buffers(bufs, "fuse");
        fuse_attn.collect_buffers(bufs, "fuse_attn");
        fc1.collect_buffers(bufs, "fc1");
        fc2.collect_buffers(bufs, "fc2");
        fc_out.collect_buffers(bufs, "fc_out");
    }
};

// Descriptor rows for a batch of clouds, stacked [(B*N) x d_desc]. Plain
// data: gradients never flow into the input geometry.
template <typename S>
Tensor<S> batch_descriptors(const GbnetModel<S>& model, const std::vector<PointCloud<S>>& batch) {
    const std::int64_t n = model.cfg.points;
    auto out = Tensor<S>::uninit({static_cast<std::int64_t>(batch.size()) * n, model.d_desc});
    std::size_t dst = 0;
    for (const auto& cloud : batch) {
        if (cloud.points.rank() != 2 || cloud.points.dim(0) != n || cloud.points.dim(1) != 3)
            shape_error("model: every cloud must be [" + std::to_string(n) + " x 3], got " +
                        shape_str(cloud.points.shape()));
        auto desc = geometric_descriptor(cloud.points, model.cfg.descriptor_form);
        std::copy(desc.data().begin(), desc.data().end(), out.data().begin() + dst);
        dst += desc.data().size();
    }
    return out;
}

// Optional capture of intermediate activations for inspection tools.
template <typename S>
struct ForwardTrace {
    std::vector<AbemState<S>> blocks;
    Tensor<S> fused_pre;   // fused features before channel attention
    Tensor<S> fused_post;  // and after
};

template <typename S>
Tensor<S> gbnet_forward(GbnetModel<S>& model, const std::vector<PointCloud<S>>& batch,
                        ForwardTrace<S>* trace = nullptr) {
    if (batch.empty()) throw ValueError("model: empty batch");
    const std::int64_t b = static_cast<std::int64_t>(batch.size());
    const std::int64_t n = model.cfg.points;

    if (model.mode == Mode::eval) {
        // eval inputs must sit in the unit sphere the way the loaders leave
        // them; train inputs are augmented and deliberately are not checked
        for (const auto& cloud : batch) {
            double max_sq = 0;
            for (std::int64_t i = 0; i < cloud.points.numel() / 3; ++i) {
                double sq = 0;
                for (int c = 0; c < 3; ++c) {
                    const double v = cloud.points.data()[static_cast<std::size_t>(i * 3 + c)];
                    sq += v * v;
                }
                max_sq = std::max(max_sq, sq);
            }
            if (std::abs(std::sqrt(max_sq) - 1.0) > 1e-3)
                throw ValueError("model: eval cloud is not normalized (max point norm " +
                                 std::to_string(std::sqrt(max_sq)) + ")");
        }
    }

    auto x = batch_descriptors(model, batch);

    // first graph in coordinate space (descriptor columns 0..2 are the point)
    auto coords = Tensor<S>::uninit({b * n, 3});
    for (std::int64_t r = 0; r < b * n; ++r)
        for (int c = 0; c < 3; ++c)
            coords.data()[static_cast<std::size_t>(r * 3 + c)] =
                x.data()[static_cast<std::size_t>(r * model.d_desc + c)];

    std::vector<Tensor<S>> skips;
    skips.reserve(model.blocks.size());
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto nbr = i == 0
                             ? knn_search_stacked(coords, n, model.cfg.k, NbrSpace::coordinate)
                             : knn_search_stacked(x, n, model.cfg.k, NbrSpace::feature);
        AbemState<S> st;
        auto r = abem_forward(model.blocks[i], x, nbr, trace ? &st : nullptr);
        if (trace) trace->blocks.push_back(std::move(st));
        skips.push_back(r.out);
        x = r.carry;
    }

    auto fused = mlp_forward(model.fuse, concat_axis(skips, 1));
    if (trace) trace->fused_pre = fused;
    fused = caa_forward_stacked(model.fuse_attn, fused);
    if (trace) trace->fused_post = fused;

    const std::int64_t w = model.fuse_width();
    auto grid = reshape(fused, {b, n, w});
    auto pooled = concat_axis<S>({reduce_max(grid, 1), reduce_mean(grid, 1)}, 1);  // [b x 2w]

    auto h = mlp_forward(model.fc1, pooled);
    if (model.mode == Mode::train && model.cfg.dropout > 0)
        h = dropout(h, model.cfg.dropout, model.dropout_rng);
    h = mlp_forward(model.fc2, h);
    if (model.mode == Mode::train && model.cfg.dropout > 0)
        h = dropout(h, model.cfg.dropout, model.dropout_rng);
    return mlp_forward(model.fc_out, h);
}

// Velocity-accumulation momentum: v <- mu*v + g, w <- w - lr*v.
template <typename S>
struct SgdMomentum {
    double momentum = 0.9;
    std::vector<std::vector<S>> velocity;

    void init(const std::vector<Param<S>>& params, double momentum_) {
        momentum = momentum_;
        velocity.clear();
        velocity.reserve(params.size());
        for (const auto& p : params)
            velocity.emplace_back(static_cast<std::size_t>(p.tensor.numel()), S(0));
    }

    void step(std::vector<Param<S>>& params, double lr) {
        if (velocity.size() != params.size())
            throw ValueError("sgd: optimizer tracks " + std::to_string(velocity.size()) +
                             " tensors, got " + std::to_string(params.size()));
        for (std::size_t t = 0; t < params.size(); ++t) {
            auto& w = params[t].tensor.data();
            const auto& g = params[t].tensor.grad();
            auto& v = velocity[t];
            if (g.size() != v.size())
                throw ValueError("sgd: missing gradient for " + params[t].name);
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = static_cast<S>(momentum * v[i] + g[i]);
                w[i] -= static_cast<S>(lr * v[i]);
            }
        }
    }
};

// lr(e) = lr_min + (lr_max - lr_min) * (1 + cos(pi * e / total)) / 2
inline double cosine_lr(double lr_max, double lr_min, std::int64_t epoch, std::int64_t total) {
    if (total < 1) throw ValueError("cosine_lr: total epochs must be >= 1");
    const double t = std::min<double>(1.0, double(epoch) / double(total));
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t));
}

struct EpochMetrics {
    double loss = 0;
    double accuracy = 0;
    double lr = 0;
};

template <typename S>
std::int64_t argmax_row(const Tensor<S>& logits, std::int64_t row) {
    const std::int64_t c = logits.dim(1);
    const S* p = logits.data().data() + row * c;
    return std::max_element(p, p + c) - p;
}

// One pass over the training set: deterministic shuffle, optional
// augmentation, forward/backward per batch, one optimizer step per batch at
// the epoch's cosine learning rate.
template <typename S>
EpochMetrics train_epoch(GbnetModel<S>& model, const Dataset<S>& data, const TrainConfig& tc,
                         SgdMomentum<S>& opt, std::int64_t epoch) {
    if (data.clouds.empty()) throw ValueError("train_epoch: empty dataset");
    model.set_mode(Mode::train);
    std::vector<Param<S>> params;
    model.collect(params);

    Pcg32 er = Pcg32(tc.seed, rng_stream::kTrain).split(static_cast<std::uint64_t>(epoch));
    std::vector<std::int64_t> order(data.clouds.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_indices(order.begin(), order.end(), er);

    const double lr = cosine_lr(tc.lr_max, tc.lr_min, epoch, tc.epochs);
    double loss_sum = 0;
    std::int64_t correct = 0, seen = 0;

    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
        const std::size_t stop = std::min(order.size(), start + tc.batch_size);
        if (stop - start < 2 && order.size() > 1) break;  // leftover single row starves BN
        std::vector<PointCloud<S>> batch;
        std::vector<std::int64_t> labels;
        for (std::size_t i = start; i < stop; ++i) {
            const auto& cloud = data.clouds[static_cast<std::size_t>(order[i])];
            batch.push_back(tc.augment
                                ? gbnet::augment(cloud, er, tc.scale_range, tc.translate_range)
                                : cloud);
            labels.push_back(cloud.label);
        }

        for (auto& p : params) p.tensor.zero_grad();
        Tape<S> tape;
        auto logits = gbnet_forward(model, batch);
        auto loss = cross_entropy_mean(logits, labels);
        const double batch_loss = loss.item();
        tape.backward(loss);
        opt.step(params, lr);

        loss_sum += batch_loss * static_cast<double>(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (argmax_row(logits, static_cast<std::int64_t>(i)) == labels[i]) ++correct;
        seen += static_cast<std::int64_t>(batch.size());
    }
    if (seen == 0) throw ValueError("train_epoch: batch size leaves no usable batches");
    return {loss_sum / static_cast<double>(seen), double(correct) / double(seen), lr};
}

struct EvalResult {
    double overall = 0;
    double avg_class = 0;
    double macro_f1 = 0;
    std::vector<double> per_class;  // recall per true class
    std::vector<double> f1;        // harmonic mean of precision and recall
    std::vector<std::int64_t> confusion;  // [c x c], row = true class
    std::int64_t classes = 0;

    std::int64_t at(std::int64_t truth, std::int64_t pred) const {
        return confusion[static_cast<std::size_t>(truth * classes + pred)];
    }
};

inline EvalResult eval_from_confusion(std::vector<std::int64_t> confusion, std::int64_t classes) {
    EvalResult r;
    r.classes = classes;
    r.confusion = std::move(confusion);
    r.per_class.assign(static_cast<std::size_t>(classes), 0.0);
    r.f1.assign(static_cast<std::size_t>(classes), 0.0);
    std::int64_t total = 0, correct = 0;
    double recall_sum = 0;
    std::int64_t present = 0;
    for (std::int64_t t = 0; t < classes; ++t) {
        std::int64_t row = 0, col = 0;
        for (std::int64_t p = 0; p < classes; ++p) {
            row += r.at(t, p);
            col += r.at(p, t);
        }
        total += row;
        correct += r.at(t, t);
        const double tp = static_cast<double>(r.at(t, t));
        if (row > 0) {
            r.per_class[static_cast<std::size_t>(t)] = tp / double(row);
            recall_sum += r.per_class[static_cast<std::size_t>(t)];
            ++present;
        }
        const double precision = col > 0 ? tp / double(col) : 0.0;
        const double recall = row > 0 ? tp / double(row) : 0.0;
        if (precision + recall > 0)
            r.f1[static_cast<std::size_t>(t)] = 2 * precision * recall / (precision + recall);
        r.macro_f1 += r.f1[static_cast<std::size_t>(t)];
    }
    if (total == 0) throw ValueError("evaluate: empty dataset");
    r.overall = double(correct) / double(total);
    r.avg_class = present > 0 ? recall_sum / double(present) : 0.0;
    r.macro_f1 /= static_cast<double>(classes);
    return r;
}

template <typename S>
EvalResult evaluate(GbnetModel<S>& model, const Dataset<S>& data, std::int64_t batch_size = 16) {
    if (data.clouds.empty()) throw ValueError("evaluate: empty dataset");
    model.set_mode(Mode::eval);
    const std::int64_t c = model.cfg.classes;
    std::vector<std::int64_t> confusion(static_cast<std::size_t>(c * c), 0);

    for (std::size_t start = 0; start < data.clouds.size(); start += batch_size) {
        const std::size_t stop = std::min(data.clouds.size(), start + batch_size);
        std::vector<PointCloud<S>> batch(data.clouds.begin() + start, data.clouds.begin() + stop);
        auto logits = gbnet_forward(model, batch);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const std::int64_t truth = batch[i].label;
            if (truth < 0 || truth >= c)
                throw ValueError("evaluate: label " + std::to_string(truth) + " outside [0, " +
                                 std::to_string(c) + ")");
            const std::int64_t pred = argmax_row(logits, static_cast<std::int64_t>(i));
            ++confusion[static_cast<std::size_t>(truth * c + pred)];
        }
    }
    return eval_from_confusion(std::move(confusion), c);
}

}  // namespace gbnet
