#pragma once
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rasa/attention.hpp"
#include "rasa/datamodel.hpp"
#include "rasa/rng.hpp"
#include "rasa/tensor.hpp"

namespace rasa {

// Text-Fused Former dimensions. The model dimension must split evenly across
// attention heads.
struct TffConfig {
    int d_text_in = 768;
    int d_patch_in = 512;
    int d_model = 256;
    int n_heads = 4;
    int n_qformer_blocks = 2;
    int n_self_blocks = 1;
    int ff_multiplier = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_text_in < 1 || d_patch_in < 1 || d_model < 1 || n_heads < 1 ||
            n_qformer_blocks < 1 || n_self_blocks < 1 || ff_multiplier < 1)
            throw ConfigError("TffConfig: all dimensions and counts must be >= 1");
        if (d_model % n_heads != 0)
            throw ConfigError("TffConfig: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
    }

    bool operator==(const TffConfig&) const = default;
};

struct LayerNormParams {
    Tensor gamma, beta;
};

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

// One pre-norm encoder block: x + attn(LN(x)) then x + FF(LN(x)).
struct EncoderBlockParams {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    FeedForwardParams ff;
};

struct TffParams {
    TffConfig config;
    Tensor text_proj_w, text_proj_b;
    Tensor patch_proj_w, patch_proj_b;
    std::vector<EncoderBlockParams> qformer_blocks;
    std::vector<EncoderBlockParams> self_blocks;
    LayerNormParams cross_ln_q, cross_ln_kv;
    AttentionParams cross_attn;
    Tensor head_w, head_b;

    // Canonical (name, tensor) listing; this order defines optimizer-state
    // alignment and the checkpoint layout.
    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto push_ln = [&](const std::string& prefix, const LayerNormParams& ln) {
            out.emplace_back(prefix + ".gamma", ln.gamma);
            out.emplace_back(prefix + ".beta", ln.beta);
        };
        auto push_attn = [&](const std::string& prefix, const AttentionParams& a) {
            out.emplace_back(prefix + ".wq", a.wq);
            out.emplace_back(prefix + ".bq", a.bq);
            out.emplace_back(prefix + ".wk", a.wk);
            out.emplace_back(prefix + ".bk", a.bk);
            out.emplace_back(prefix + ".wv", a.wv);
            out.emplace_back(prefix + ".bv", a.bv);
            out.emplace_back(prefix + ".wo", a.wo);
            out.emplace_back(prefix + ".bo", a.bo);
        };
        auto push_block = [&](const std::string& prefix, const EncoderBlockParams& b) {
            push_ln(prefix + ".ln1", b.ln1);
            push_attn(prefix + ".attn", b.attn);
            push_ln(prefix + ".ln2", b.ln2);
            out.emplace_back(prefix + ".ff.w1", b.ff.w1);
            out.emplace_back(prefix + ".ff.b1", b.ff.b1);
            out.emplace_back(prefix + ".ff.w2", b.ff.w2);
            out.emplace_back(prefix + ".ff.b2", b.ff.b2);
        };
        out.emplace_back("text_proj.w", text_proj_w);
        out.emplace_back("text_proj.b", text_proj_b);
        out.emplace_back("patch_proj.w", patch_proj_w);
        out.emplace_back("patch_proj.b", patch_proj_b);
        for (std::size_t i = 0; i < qformer_blocks.size(); ++i)
            push_block("qformer." + std::to_string(i), qformer_blocks[i]);
        for (std::size_t i = 0; i < self_blocks.size(); ++i)
            push_block("self." + std::to_string(i), self_blocks[i]);
        push_ln("cross.ln_q", cross_ln_q);
        push_ln("cross.ln_kv", cross_ln_kv);
        push_attn("cross.attn", cross_attn);
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    std::vector<Tensor> all() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [name, t] : named()) n += t.size();
        return n;
    }

    TffParams deep_copy() const;
};

namespace detail {

inline Tensor glorot(Rng& rng, int fan_in, int fan_out, bool requires_grad = true) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> v(static_cast<std::size_t>(fan_in) * fan_out);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from_values(fan_in, fan_out, std::move(v), requires_grad);
}

inline LayerNormParams init_ln(int d) {
    return {Tensor::full(1, d, 1.0, true), Tensor::zeros(1, d, true)};
}

inline AttentionParams init_attention(Rng& rng, int d, int heads) {
    AttentionParams a;
    a.n_heads = heads;
    a.wq = glorot(rng, d, d);
    a.bq = Tensor::zeros(1, d, true);
    a.wk = glorot(rng, d, d);
    a.bk = Tensor::zeros(1, d, true);
    a.wv = glorot(rng, d, d);
    a.bv = Tensor::zeros(1, d, true);
    a.wo = glorot(rng, d, d);
    a.bo = Tensor::zeros(1, d, true);
    return a;
}

inline EncoderBlockParams init_block(Rng& rng, int d, int heads, int ff_mult) {
    EncoderBlockParams b;
    b.ln1 = init_ln(d);
    b.attn = init_attention(rng, d, heads);
    b.ln2 = init_ln(d);
    const int f = d * ff_mult;
    b.ff.w1 = glorot(rng, d, f);
    b.ff.b1 = Tensor::zeros(1, f, true);
    b.ff.w2 = glorot(rng, f, d);
    b.ff.b2 = Tensor::zeros(1, d, true);
    return b;
}

}  // namespace detail

// Seeded Glorot initialization for all linear maps, zero biases, identity
// layer norms.
inline TffParams init_params(const TffConfig& config) {
    config.validate();
    Rng rng = Rng(config.seed).fork("tff_init");
    TffParams p;
    p.config = config;
    const int d = config.d_model;
    p.text_proj_w = detail::glorot(rng, config.d_text_in, d);
    p.text_proj_b = Tensor::zeros(1, d, true);
    p.patch_proj_w = detail::glorot(rng, config.d_patch_in, d);
    p.patch_proj_b = Tensor::zeros(1, d, true);
    // Tied-tower start: when the two input spaces share a dimension the
    // projections begin identical (and diverge freely during training). This
    // stands in for the modality-aligned encoder geometry the upstream
    // feature extractors provide; without it the cross-modal alignment sign
    // at initialization is arbitrary.
    if (config.d_text_in == config.d_patch_in) {
        auto src = p.patch_proj_w.data();
        auto dst = p.text_proj_w.mutable_data();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
    }
    for (int i = 0; i < config.n_qformer_blocks; ++i)
        p.qformer_blocks.push_back(detail::init_block(rng, d, config.n_heads, config.ff_multiplier));
    for (int i = 0; i < config.n_self_blocks; ++i)
        p.self_blocks.push_back(detail::init_block(rng, d, config.n_heads, config.ff_multiplier));
    p.cross_ln_q = detail::init_ln(d);
    p.cross_ln_kv = detail::init_ln(d);
    p.cross_attn = detail::init_attention(rng, d, config.n_heads);
    p.head_w = detail::glorot(rng, d, 1);
    p.head_b = Tensor::zeros(1, 1, true);
    return p;
}

inline TffParams TffParams::deep_copy() const {
    TffParams copy = init_params(config);
    auto src = named();
    auto dst = copy.named();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto s = src[i].second.data();
        auto d = dst[i].second.mutable_data();
        for (std::size_t j = 0; j < s.size(); ++j) d[j] = s[j];
    }
    return copy;
}

// Closed-form parameter count for a config.
inline std::size_t expected_parameter_count(const TffConfig& c) {
    auto block = [&](std::size_t d, std::size_t f) {
        return 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
    };
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t f = d * c.ff_multiplier;
    std::size_t n = 0;
    n += static_cast<std::size_t>(c.d_text_in) * d + d;
    n += static_cast<std::size_t>(c.d_patch_in) * d + d;
    n += static_cast<std::size_t>(c.n_qformer_blocks) * block(d, f);
    n += static_cast<std::size_t>(c.n_self_blocks) * block(d, f);
    n += 4 * d + 4 * (d * d + d);
    n += d + 1;
    return n;
}

struct ForwardOutput {
    Tensor risk;       // 1 x 1
    Tensor t_proj;     // tokens x d_model, row i depends on text row i only
    Tensor t_refined;  // tokens x d_model
    Tensor fused;      // tokens x d_model (cross-attention output)
};

namespace detail {

inline Tensor apply_ln(const Tensor& x, const LayerNormParams& p) {
    return layer_norm_rows(x, p.gamma, p.beta);
}

inline Tensor encoder_block(const Tensor& x, const EncoderBlockParams& p) {
    Tensor a = apply_ln(x, p.ln1);
    Tensor x1 = add(x, multi_head_attention(a, a, a, p.attn));
    Tensor b = apply_ln(x1, p.ln2);
    Tensor h = add_rowvec(matmul(gelu(add_rowvec(matmul(b, p.ff.w1), p.ff.b1)), p.ff.w2), p.ff.b2);
    return add(x1, h);
}

}  // namespace detail

// Forward pass over one case: project text, refine with the Q-Former stack,
// self-attend projected patches, fuse with text-queried cross-attention,
// mean-pool, and read out a scalar risk. Differentiable end to end.
inline ForwardOutput tff_forward(const TffParams& params, const FeatureBag& text,
                                 const FeatureBag& patches) {
    if (text.n < 1 || patches.n < 1) throw ShapeError("tff_forward: empty feature bag");
    if (text.d != params.config.d_text_in)
        throw ShapeError("tff_forward: text dim " + std::to_string(text.d) + " != configured " +
                         std::to_string(params.config.d_text_in));
    if (patches.d != params.config.d_patch_in)
        throw ShapeError("tff_forward: patch dim " + std::to_string(patches.d) + " != configured " +
                         std::to_string(params.config.d_patch_in));

    ForwardOutput out;
    Tensor t_in = text.to_tensor();
    out.t_proj = add_rowvec(matmul(t_in, params.text_proj_w), params.text_proj_b);
    Tensor t = out.t_proj;
    for (const auto& b : params.qformer_blocks) t = detail::encoder_block(t, b);
    out.t_refined = t;

    Tensor x = patches.to_tensor();
    x = add_rowvec(matmul(x, params.patch_proj_w), params.patch_proj_b);
    for (const auto& b : params.self_blocks) x = detail::encoder_block(x, b);

    Tensor q = detail::apply_ln(t, params.cross_ln_q);
    Tensor kv = detail::apply_ln(x, params.cross_ln_kv);
    out.fused = add(t, multi_head_attention(q, kv, kv, params.cross_attn));
    Tensor pooled = mean_rows(out.fused);
    out.risk = add_rowvec(matmul(pooled, params.head_w), params.head_b);
    return out;
}

// Projected patch rows (patch input projection only), the space the sampler
// measures similarities in.
inline Tensor project_patches(const TffParams& params, const FeatureBag& patches) {
    if (patches.d != params.config.d_patch_in)
        throw ShapeError("project_patches: patch dim " + std::to_string(patches.d) +
                         " != configured " + std::to_string(params.config.d_patch_in));
    return add_rowvec(matmul(patches.to_tensor(), params.patch_proj_w), params.patch_proj_b);
}

// ---- checkpoint files ----
// magic "RASC" | version u16 LE (=1) | config (7 x u32, seed u64)
// | tensor count u32 | per tensor: name (u32 length + bytes), rows u32,
//   cols u32, rows*cols f64 LE

constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const TffParams& params) {
    std::string out;
    out += "RASC";
    detail::put_u16le(out, kCheckpointVersion);
    const TffConfig& c = params.config;
    detail::put_u32le(out, static_cast<std::uint32_t>(c.d_text_in));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.d_patch_in));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.d_model));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.n_heads));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.n_qformer_blocks));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.n_self_blocks));
    detail::put_u32le(out, static_cast<std::uint32_t>(c.ff_multiplier));
    detail::put_u64le(out, c.seed);
    auto named = params.named();
    detail::put_u32le(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        detail::put_u32le(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32le(out, static_cast<std::uint32_t>(t.rows()));
        detail::put_u32le(out, static_cast<std::uint32_t>(t.cols()));
        for (double v : t.data()) detail::put_f64le(out, v);
    }
    return out;
}

inline void save_checkpoint(const TffParams& params, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_checkpoint(params));
}

inline TffParams load_checkpoint(const std::filesystem::path& path,
                                 const TffConfig* expected = nullptr) {
    const std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r(buf, path.filename().string());
    if (r.bytes(4) != "RASC")
        throw ParseError(path.filename().string() + ": bad magic, expected RASC");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw ParseError(path.filename().string() + ": unsupported checkpoint version " +
                         std::to_string(version));
    TffConfig c;
    c.d_text_in = static_cast<int>(r.u32());
    c.d_patch_in = static_cast<int>(r.u32());
    c.d_model = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.n_qformer_blocks = static_cast<int>(r.u32());
    c.n_self_blocks = static_cast<int>(r.u32());
    c.ff_multiplier = static_cast<int>(r.u32());
    c.seed = r.u64();
    c.validate();
    if (expected) {
        auto mismatch = [&](const char* field, auto got, auto want) {
            throw ConfigError(path.filename().string() + ": checkpoint config mismatch on " +
                              field + " (file has " + std::to_string(got) + ", expected " +
                              std::to_string(want) + ")");
        };
        if (c.d_text_in != expected->d_text_in) mismatch("d_text_in", c.d_text_in, expected->d_text_in);
        if (c.d_patch_in != expected->d_patch_in)
            mismatch("d_patch_in", c.d_patch_in, expected->d_patch_in);
        if (c.d_model != expected->d_model) mismatch("d_model", c.d_model, expected->d_model);
        if (c.n_heads != expected->n_heads) mismatch("n_heads", c.n_heads, expected->n_heads);
        if (c.n_qformer_blocks != expected->n_qformer_blocks)
            mismatch("n_qformer_blocks", c.n_qformer_blocks, expected->n_qformer_blocks);
        if (c.n_self_blocks != expected->n_self_blocks)
            mismatch("n_self_blocks", c.n_self_blocks, expected->n_self_blocks);
        if (c.ff_multiplier != expected->ff_multiplier)
            mismatch("ff_multiplier", c.ff_multiplier, expected->ff_multiplier);
    }
    TffParams params = init_params(c);
    auto named = params.named();
    const std::uint32_t count = r.u32();
    if (count != named.size())
        throw ParseError(path.filename().string() + ": tensor count " + std::to_string(count) +
                         " does not match config-derived " + std::to_string(named.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        if (name != named[i].first)
            throw ParseError(path.filename().string() + ": tensor " + std::to_string(i) +
                             " named '" + name + "', expected '" + named[i].first + "'");
        const int rows = static_cast<int>(r.u32());
        const int cols = static_cast<int>(r.u32());
        Tensor& t = named[i].second;
        if (rows != t.rows() || cols != t.cols())
            throw ParseError(path.filename().string() + ": tensor '" + name + "' has shape " +
                             Tensor::shape_str(rows, cols) + ", expected " + t.shape_str());
        auto dst = t.mutable_data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = r.f64();
    }
    r.expect_end();
    return params;
}

}  // namespace rasa
