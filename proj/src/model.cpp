// SPDX-License-Identifier: Apache-2.0
#include "loramerge/model.hpp"

#include <algorithm>

namespace loramerge {

ToyModel build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ToyModel m;
    m.config = config;
    m.seed = seed;

    auto init = [&](const std::string& label, std::size_t rows, std::size_t cols) {
        Rng rng(derive_seed(seed, "model/" + label));
        return Matrix::randn(rows, cols, 0.02, rng);
    };

    m.embed = init("embed", config.vocab, config.d_model);
    m.pos = init("pos", config.max_seq, config.d_model);
    m.head = init("head", config.vocab, config.d_model);
    for (const ModulePath& p : config.all_module_paths()) {
        const std::size_t out = config.out_dim(p.type);
        const std::size_t in = config.in_dim(p.type);
        if (p.type == ModuleType::o_proj)
            m.weights.emplace(p, Matrix::zeros(out, in));
        else
            m.weights.emplace(p, init(to_string(p), out, in));
    }
    for (int l = 0; l < config.n_layers; ++l) {
        m.attn_norm_gain.push_back(Matrix::filled(1, config.d_model, 1.0));
        m.ffn_norm_gain.push_back(Matrix::filled(1, config.d_model, 1.0));
    }
    m.final_norm_gain = Matrix::filled(1, config.d_model, 1.0);
    return m;
}

Batch Batch::pack(std::span<const Example> examples) {
    if (examples.empty()) throw ArgumentError("batch: no examples");
    Batch b;
    b.batch = static_cast<int>(examples.size());
    b.prompt_len = static_cast<int>(examples[0].prompt.size());
    const int answer_len = static_cast<int>(examples[0].answer.size());
    if (answer_len == 0) throw ArgumentError("batch: empty answer");
    b.seq = b.prompt_len + answer_len;
    b.tokens.reserve(static_cast<std::size_t>(b.batch) * static_cast<std::size_t>(b.seq));
    for (const Example& e : examples) {
        if (static_cast<int>(e.prompt.size()) != b.prompt_len ||
            static_cast<int>(e.answer.size()) != answer_len)
            throw ArgumentError("batch: examples have non-uniform shapes");
        b.tokens.insert(b.tokens.end(), e.prompt.begin(), e.prompt.end());
        b.tokens.insert(b.tokens.end(), e.answer.begin(), e.answer.end());
    }
    return b;
}

namespace {

Tape::Id effective_weight(Tape& tape, const ToyModel& model, const OverlayNodes* overlay,
                          const ModulePath& p) {
    const Tape::Id base = tape.constant(model.weights.at(p));
    if (!overlay) return base;
    const auto it = overlay->find(p);
    if (it == overlay->end()) return base;
    return tape.add(base, it->second);
}

}  // namespace

Tape::Id build_logits(Tape& tape, const ToyModel& model, const OverlayNodes* overlay,
                      const Batch& batch, int input_len) {
    const ModelConfig& cfg = model.config;
    if (input_len < 1 || input_len > batch.seq)
        throw ArgumentError("forward: input_len " + std::to_string(input_len) +
                            " out of range for seq " + std::to_string(batch.seq));
    if (static_cast<std::size_t>(input_len) > cfg.max_seq)
        throw ArgumentError("forward: sequence length " + std::to_string(input_len) +
                            " exceeds max_seq " + std::to_string(cfg.max_seq));

    std::vector<std::int32_t> tok_ids, pos_ids;
    tok_ids.reserve(static_cast<std::size_t>(batch.batch) * input_len);
    pos_ids.reserve(tok_ids.capacity());
    for (int b = 0; b < batch.batch; ++b) {
        for (int t = 0; t < input_len; ++t) {
            const std::int32_t tok = batch.tokens[static_cast<std::size_t>(b) * batch.seq + t];
            if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab)
                throw ArgumentError("forward: token " + std::to_string(tok) +
                                    " outside vocab " + std::to_string(cfg.vocab));
            tok_ids.push_back(tok);
            pos_ids.push_back(t);
        }
    }

    const Tape::Id embed = tape.constant(model.embed);
    const Tape::Id pos = tape.constant(model.pos);
    Tape::Id x = tape.add(tape.gather_rows(embed, tok_ids), tape.gather_rows(pos, pos_ids));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const Tape::Id n1 = tape.mul_row_vec(tape.rms_norm_rows(x, kRmsEps),
                                             tape.constant(model.attn_norm_gain[l]));
        const Tape::Id q =
            tape.matmul_nt(n1, effective_weight(tape, model, overlay, {l, ModuleType::q_proj}));
        const Tape::Id k =
            tape.matmul_nt(n1, effective_weight(tape, model, overlay, {l, ModuleType::k_proj}));
        const Tape::Id v =
            tape.matmul_nt(n1, effective_weight(tape, model, overlay, {l, ModuleType::v_proj}));
        const Tape::Id att = tape.causal_attention(q, k, v, cfg.n_heads, batch.batch, input_len);
        x = tape.add(
            x, tape.matmul_nt(att, effective_weight(tape, model, overlay, {l, ModuleType::o_proj})));

        const Tape::Id n2 = tape.mul_row_vec(tape.rms_norm_rows(x, kRmsEps),
                                             tape.constant(model.ffn_norm_gain[l]));
        const Tape::Id gate = tape.silu(
            tape.matmul_nt(n2, effective_weight(tape, model, overlay, {l, ModuleType::gate_proj})));
        const Tape::Id up =
            tape.matmul_nt(n2, effective_weight(tape, model, overlay, {l, ModuleType::up_proj}));
        x = tape.add(x, tape.matmul_nt(tape.hadamard(gate, up),
                                       effective_weight(tape, model, overlay,
                                                        {l, ModuleType::down_proj})));
    }

    const Tape::Id final_norm = tape.mul_row_vec(tape.rms_norm_rows(x, kRmsEps),
                                                 tape.constant(model.final_norm_gain));
    return tape.matmul_nt(final_norm, tape.constant(model.head));
}

Tape::Id build_loss(Tape& tape, const ToyModel& model, const OverlayNodes* overlay,
                    const Batch& batch) {
    const int input_len = batch.seq - 1;
    const Tape::Id logits = build_logits(tape, model, overlay, batch, input_len);

    std::vector<std::int32_t> targets;
    std::vector<double> weights;
    targets.reserve(static_cast<std::size_t>(batch.batch) * input_len);
    weights.reserve(targets.capacity());
    for (int b = 0; b < batch.batch; ++b) {
        for (int t = 0; t < input_len; ++t) {
            targets.push_back(batch.tokens[static_cast<std::size_t>(b) * batch.seq + t + 1]);
            weights.push_back(t + 1 >= batch.prompt_len ? 1.0 : 0.0);
        }
    }
    return tape.cross_entropy(logits, std::move(targets), std::move(weights));
}

OverlayNodes overlay_constants(Tape& tape, const TaskVectorSet& overlay) {
    OverlayNodes nodes;
    for (const auto& [path, delta] : overlay.deltas) nodes.emplace(path, tape.constant(delta));
    return nodes;
}

double forward_loss(const ToyModel& model, const TaskVectorSet* overlay,
                    std::span<const Example> batch) {
    const Batch packed = Batch::pack(batch);
    Tape tape;
    OverlayNodes nodes;
    if (overlay) nodes = overlay_constants(tape, *overlay);
    const Tape::Id loss = build_loss(tape, model, overlay ? &nodes : nullptr, packed);
    return tape.value(loss)(0, 0);
}

std::vector<std::vector<std::int32_t>> greedy_decode(const ToyModel& model,
                                                     const TaskVectorSet* overlay,
                                                     std::span<const Example> prompts,
                                                     int answer_len) {
    if (prompts.empty()) throw ArgumentError("decode: no prompts");
    if (answer_len < 1) throw ArgumentError("decode: answer_len must be >= 1");

    // Working batch with room for the generated suffix.
    Batch batch;
    batch.batch = static_cast<int>(prompts.size());
    batch.prompt_len = static_cast<int>(prompts[0].prompt.size());
    batch.seq = batch.prompt_len + answer_len;
    batch.tokens.assign(static_cast<std::size_t>(batch.batch) * batch.seq, 0);
    for (int b = 0; b < batch.batch; ++b) {
        if (static_cast<int>(prompts[b].prompt.size()) != batch.prompt_len)
            throw ArgumentError("decode: non-uniform prompt lengths");
        std::copy(prompts[b].prompt.begin(), prompts[b].prompt.end(),
                  batch.tokens.begin() + static_cast<std::size_t>(b) * batch.seq);
    }

    std::vector<std::vector<std::int32_t>> out(prompts.size());
    for (int step = 0; step < answer_len; ++step) {
        const int cur = batch.prompt_len + step;
        Tape tape;
        OverlayNodes nodes;
        if (overlay) nodes = overlay_constants(tape, *overlay);
        const Tape::Id logits_id =
            build_logits(tape, model, overlay ? &nodes : nullptr, batch, cur);
        const Matrix& logits = tape.value(logits_id);
        for (int b = 0; b < batch.batch; ++b) {
            const std::size_t row = static_cast<std::size_t>(b) * cur + (cur - 1);
            std::size_t best = 0;
            double best_v = logits(row, 0);
            for (std::size_t c = 1; c < logits.cols(); ++c) {
                if (logits(row, c) > best_v) {
                    best_v = logits(row, c);
                    best = c;
                }
            }
            const auto tok = static_cast<std::int32_t>(best);
            out[static_cast<std::size_t>(b)].push_back(tok);
            batch.tokens[static_cast<std::size_t>(b) * batch.seq + cur] = tok;
        }
    }
    return out;
}

double evaluate_accuracy(const ToyModel& model, const TaskVectorSet* overlay,
                         std::span<const Example> split) {
    if (split.empty()) throw ArgumentError("evaluate_accuracy: empty split");
    const int answer_len = static_cast<int>(split[0].answer.size());
    const auto decoded = greedy_decode(model, overlay, split, answer_len);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (decoded[i] == split[i].answer) ++hits;
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

}  // namespace loramerge
