#pragma once

#include <array>
#include <string>
#include <vector>

#include "cmust/embedding.hpp"
#include "cmust/fsio.hpp"
#include "cmust/rng.hpp"

namespace cmust {

// Interaction-network widths. D_cross is the attention width for the four
// cross-interaction directions, D_self for the two full-width
// self-interactions; both must be divisible by the head count.
struct AttentionConfig {
    std::size_t d_cross = 8;
    std::size_t d_self = 32;
    std::size_t heads = 2;
    std::size_t ffn_hidden = 32;
    std::size_t blocks = 1;
};

struct ModelConfig {
    std::string profile = "tiny";
    SliceLayout layout;
    std::size_t h_obs = 16;
    AttentionConfig attn;
    std::size_t d_f = 8;   // fused width
    std::size_t d_y = 8;   // pre-regression width
    std::size_t input_len = 12;
    std::size_t horizon = 12;
    std::size_t c_in = 3;   // data channels + tod + dow
    std::size_t c_out = 1;
    std::size_t slots_per_day = 96;
    std::size_t nodes = 16;
    double ln_eps = 1e-5;
    bool use_cross_context = true;   // SCCI + TCCI; off in the no-interaction ablation
    bool tcci_bidirectional = true;
    bool prompt_per_node = true;     // false: one shared d_p vector for all nodes

    void validate() const {
        layout.validate();
        if (attn.heads == 0 || attn.d_cross % attn.heads != 0 || attn.d_self % attn.heads != 0)
            throw config_error("attention widths must be divisible by the head count (heads=" +
                               std::to_string(attn.heads) + ", D_cross=" +
                               std::to_string(attn.d_cross) + ", D_self=" +
                               std::to_string(attn.d_self) + ")");
        if (attn.blocks == 0 || attn.ffn_hidden == 0)
            throw config_error("blocks and ffn_hidden must be positive");
        if (input_len == 0 || horizon == 0 || c_in == 0 || c_out == 0 || nodes == 0)
            throw config_error("model dimensions must be positive");
        if (ln_eps <= 0.0) throw config_error("ln_eps must be positive");
    }
};

inline ModelConfig tiny_profile() {
    ModelConfig c;
    c.profile = "tiny";
    c.layout = {8, 4, 12, 8};
    c.h_obs = 16;
    c.attn = {8, 32, 2, 32, 1};
    c.d_f = 8;
    c.d_y = 8;
    return c;
}

inline ModelConfig full_profile() {
    ModelConfig c;
    c.profile = "full";
    c.layout = {24, 12, 60, 72};
    c.h_obs = 64;
    c.attn = {24, 168, 4, 256, 1};
    c.d_f = 24;
    c.d_y = 32;
    return c;
}

inline Json model_config_to_json(const ModelConfig& c) {
    return Json{{"profile", c.profile},
                {"d_obs", c.layout.d_obs},
                {"d_s", c.layout.d_s},
                {"d_t", c.layout.d_t},
                {"d_p", c.layout.d_p},
                {"h_obs", c.h_obs},
                {"d_cross", c.attn.d_cross},
                {"d_self", c.attn.d_self},
                {"heads", c.attn.heads},
                {"ffn_hidden", c.attn.ffn_hidden},
                {"blocks", c.attn.blocks},
                {"d_f", c.d_f},
                {"d_y", c.d_y},
                {"input_len", c.input_len},
                {"horizon", c.horizon},
                {"c_in", c.c_in},
                {"c_out", c.c_out},
                {"slots_per_day", c.slots_per_day},
                {"nodes", c.nodes},
                {"ln_eps", c.ln_eps},
                {"use_cross_context", c.use_cross_context},
                {"tcci_bidirectional", c.tcci_bidirectional},
                {"prompt_per_node", c.prompt_per_node}};
}

inline ModelConfig model_config_from_json(const Json& j) {
    ModelConfig c;
    c.profile = j.at("profile").get<std::string>();
    c.layout = {j.at("d_obs").get<std::size_t>(), j.at("d_s").get<std::size_t>(),
                j.at("d_t").get<std::size_t>(), j.at("d_p").get<std::size_t>()};
    c.h_obs = j.at("h_obs").get<std::size_t>();
    c.attn = {j.at("d_cross").get<std::size_t>(), j.at("d_self").get<std::size_t>(),
              j.at("heads").get<std::size_t>(), j.at("ffn_hidden").get<std::size_t>(),
              j.at("blocks").get<std::size_t>()};
    c.d_f = j.at("d_f").get<std::size_t>();
    c.d_y = j.at("d_y").get<std::size_t>();
    c.input_len = j.at("input_len").get<std::size_t>();
    c.horizon = j.at("horizon").get<std::size_t>();
    c.c_in = j.at("c_in").get<std::size_t>();
    c.c_out = j.at("c_out").get<std::size_t>();
    c.slots_per_day = j.at("slots_per_day").get<std::size_t>();
    c.nodes = j.at("nodes").get<std::size_t>();
    c.ln_eps = j.at("ln_eps").get<double>();
    c.use_cross_context = j.at("use_cross_context").get<bool>();
    c.tcci_bidirectional = j.at("tcci_bidirectional").get<bool>();
    c.prompt_per_node = j.at("prompt_per_node").get<bool>();
    c.validate();
    return c;
}

// Row-normalized score matrices captured per interaction stage and head.
struct AttentionMaps {
    struct Stage {
        std::string stage;          // scci_so, scci_os, tcci_to, tcci_ot, tsi, ssi
        std::string axis;           // "spatial" or "temporal"
        std::size_t seq_len = 0;    // N for spatial stages, T for temporal
        std::size_t inner = 0;      // group = batch_index * inner + context_index
        std::vector<Tensor> per_head;  // each [G, L, L]
    };
    std::vector<Stage> stages;

    const Stage* find(const std::string& name) const {
        for (const auto& s : stages)
            if (s.stage == name) return &s;
        return nullptr;
    }
};

// pos(t, 2d) = sin(t / 10000^{2d/D}), pos(t, 2d+1) = cos(t / 10000^{2d/D});
// for odd D the last column falls back to the sine formula.
inline Tensor positional_encoding(std::size_t t_len, std::size_t d) {
    if (t_len == 0 || d == 0) throw config_error("positional_encoding: empty shape");
    Tensor pe = Tensor::zeros({t_len, d});
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j < d; ++j) {
            std::size_t even = j - (j % 2);
            double angle = static_cast<double>(t) /
                           std::pow(10000.0, static_cast<double>(even) / static_cast<double>(d));
            pe[t * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

namespace detail {

struct AttnParams {
    Parameter *wq = nullptr, *wk = nullptr, *wv = nullptr, *wo = nullptr;
    Parameter *ln1_g = nullptr, *ln1_b = nullptr, *ln2_g = nullptr, *ln2_b = nullptr;
    Parameter *ffn_w1 = nullptr, *ffn_b1 = nullptr, *ffn_w2 = nullptr, *ffn_b2 = nullptr;
};

}  // namespace detail

// The MSTI network: integrated representation assembly, the four
// cross-interaction directions, the two self-interactions, and the fused
// regression head. Holds the shared parameters; task prompts are owned by the
// caller and passed into forward().
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(sub_seed(init_seed, "model-init"));
        register_params(rng);
        pe_ = positional_encoding(cfg_.input_len, cfg_.layout.d_t);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return store_; }
    const ParameterStore& params() const { return store_; }
    std::vector<Parameter*> shared_params() { return store_.all(); }

    Shape prompt_shape() const {
        return cfg_.prompt_per_node ? Shape{cfg_.nodes, cfg_.layout.d_p}
                                    : Shape{1, cfg_.layout.d_p};
    }

    // ---- embedding stages ----

    // two-layer MLP applied per (b, t, n): C_in -> h_obs -> d_obs
    Var embed_observations(ForwardCtx& ctx, const Tensor& x_obs) {
        if (x_obs.last_dim() != cfg_.c_in)
            throw shape_error("embed_observations: expected " + std::to_string(cfg_.c_in) +
                              " channels, got " + std::to_string(x_obs.last_dim()));
        Var h = add_bias(matmul(constant(x_obs), ctx.use(*obs_w1_)), ctx.use(*obs_b1_));
        return add_bias(matmul(relu(h), ctx.use(*obs_w2_)), ctx.use(*obs_b2_));
    }

    // single linear map on normalized (lon, lat)
    Var embed_spatial(ForwardCtx& ctx, const Tensor& coords_norm) {
        require_finite(coords_norm, "embed_spatial coords");
        if (coords_norm.last_dim() != 2) throw shape_error("embed_spatial: [N,2] coords required");
        return add_bias(matmul(constant(coords_norm), ctx.use(*sp_w_)), ctx.use(*sp_b_));
    }

    // dow and tod lookups plus a linear timestamp map, concatenated and mixed
    Var embed_temporal(ForwardCtx& ctx, const std::vector<int>& tod, const std::vector<int>& dow,
                       const Tensor& ts) {
        std::size_t rows = tod.size();
        if (dow.size() != rows || ts.size() != rows * 6)
            throw shape_error("embed_temporal: indicator lengths disagree");
        for (int v : dow)
            if (v < 0 || v >= 7) throw shape_error("embed_temporal: dow index out of range");
        // tod range is enforced by the lookup against the table height L_t
        Var dow_e = embedding_lookup(ctx.use(*tm_dow_), dow);
        Var tod_e = embedding_lookup(ctx.use(*tm_tod_), tod);
        Tensor ts2(Shape{rows, 6}, ts.data);
        Var ts_e = add_bias(matmul(constant(std::move(ts2)), ctx.use(*tm_ts_w_)),
                            ctx.use(*tm_ts_b_));
        Var cat = concat_last({dow_e, tod_e, ts_e});
        return add_bias(matmul(cat, ctx.use(*tm_out_w_)), ctx.use(*tm_out_b_));
    }

    Var prompt_rows(ForwardCtx& ctx, Parameter& prompt) {
        Var p = ctx.use(prompt);
        if (!cfg_.prompt_per_node) p = tile_rows(p, cfg_.nodes);
        return p;  // [N, d_p]
    }

    // H = E_obs || E_s || E_t || P, slices in layout order
    Var assemble_representation(ForwardCtx&, const Var& e_obs, const Var& e_s, const Var& e_t,
                                const Var& prompt_n) {
        const SliceLayout& L = cfg_.layout;
        std::size_t b = e_obs.shape()[0], t = e_obs.shape()[1], n = e_obs.shape()[2];
        if (e_obs.shape()[3] != L.d_obs || e_s.value().last_dim() != L.d_s ||
            e_t.value().last_dim() != L.d_t || prompt_n.value().last_dim() != L.d_p)
            throw shape_error("assemble_representation: slice widths do not match layout");
        Var es4 = tile_bt(e_s, b, t);
        Var et4 = tile_axis2(e_t, n);
        Var p4 = tile_bt(prompt_n, b, t);
        return concat_last({e_obs, es4, et4, p4});
    }

    // ---- interaction stages ----

    // One cross-interaction direction (a, b): slice a provides the queries,
    // slice b the keys and values, and only slice b is rewritten. Valid
    // directions are (s,o), (o,s) on the spatial axis and (t,o), (o,t) on the
    // temporal axis.
    Var cross_attention_direction(ForwardCtx& ctx, const Var& h, char q_slice, char kv_slice,
                                  std::size_t block = 0, AttentionMaps* maps = nullptr) {
        const SliceLayout& L = cfg_.layout;
        const BlockParams& bp = blocks_.at(block);
        if (q_slice == 's' && kv_slice == 'o')
            return cross_attention_block(ctx, h, L.s_offset(), L.d_s, L.obs_offset(), L.d_obs,
                                         bp.scci_so, stage_name("scci_so", block), "spatial",
                                         maps);
        if (q_slice == 'o' && kv_slice == 's')
            return cross_attention_block(ctx, h, L.obs_offset(), L.d_obs, L.s_offset(), L.d_s,
                                         bp.scci_os, stage_name("scci_os", block), "spatial",
                                         maps);
        if (q_slice == 't' && kv_slice == 'o')
            return cross_attention_block(ctx, h, L.t_offset(), L.d_t, L.obs_offset(), L.d_obs,
                                         bp.tcci_to, stage_name("tcci_to", block), "temporal",
                                         maps);
        if (q_slice == 'o' && kv_slice == 't')
            return cross_attention_block(ctx, h, L.obs_offset(), L.d_obs, L.t_offset(), L.d_t,
                                         bp.tcci_ot, stage_name("tcci_ot", block), "temporal",
                                         maps);
        throw config_error(std::string("no cross-interaction direction (") + q_slice + "," +
                           kv_slice + ")");
    }

    // SCCI on the spatial axis: (s,o) updates the observation slice, then
    // (o,s) updates the spatial slice; temporal and prompt slices pass through
    // bit-identical.
    Var scci(ForwardCtx& ctx, const Var& h, std::size_t block, AttentionMaps* maps = nullptr) {
        Var h1 = cross_attention_direction(ctx, h, 's', 'o', block, maps);
        return cross_attention_direction(ctx, h1, 'o', 's', block, maps);
    }

    // TCCI on the temporal axis (input already transposed to [B,N,T,d_h]):
    // adds positional encoding into the temporal slice, then runs (t,o) and,
    // unless disabled, (o,t).
    Var tcci(ForwardCtx& ctx, const Var& ht, std::size_t block, AttentionMaps* maps = nullptr) {
        Var h = add_positional_encoding(ht);
        h = cross_attention_direction(ctx, h, 't', 'o', block, maps);
        if (cfg_.tcci_bidirectional) h = cross_attention_direction(ctx, h, 'o', 't', block, maps);
        return h;
    }

    Var tsi(ForwardCtx& ctx, const Var& ht, std::size_t block, AttentionMaps* maps = nullptr) {
        return self_attention_block(ctx, ht, blocks_[block].tsi, stage_name("tsi", block),
                                    "temporal", maps);
    }

    Var ssi(ForwardCtx& ctx, const Var& h, std::size_t block, AttentionMaps* maps = nullptr) {
        return self_attention_block(ctx, h, blocks_[block].ssi, stage_name("ssi", block),
                                    "spatial", maps);
    }

    // parameter-matrix fusion of the interaction slices plus the prompt
    // response, then a per-node linear map flattening T*d_y -> T'*C_out
    Var fuse_and_predict(ForwardCtx& ctx, const Var& h) {
        const SliceLayout& L = cfg_.layout;
        std::size_t b = h.shape()[0], t = h.shape()[1], n = h.shape()[2];
        if (t != cfg_.input_len)
            throw shape_error("fuse_and_predict: time axis " + std::to_string(t) +
                              " != input_len " + std::to_string(cfg_.input_len));
        Var ho = slice_last(h, L.obs_offset(), L.d_obs);
        Var hs = slice_last(h, L.s_offset(), L.d_s);
        Var htm = slice_last(h, L.t_offset(), L.d_t);
        Var hp = slice_last(h, L.p_offset(), L.d_p);
        Var z = add(add(matmul(ho, ctx.use(*fuse_wo_)), matmul(hs, ctx.use(*fuse_ws_))),
                    matmul(htm, ctx.use(*fuse_wt_)));
        Var u = add(matmul(z, ctx.use(*fuse_wz_)), matmul(hp, ctx.use(*fuse_wp_)));
        Var ut = transpose12(u);  // [B,N,T,d_y]
        Var uf = reshape(ut, {b * n, t * cfg_.d_y});
        Var y = add_bias(matmul(uf, ctx.use(*out_w_)), ctx.use(*out_b_));
        Var y4 = reshape(y, {b, n, cfg_.horizon, cfg_.c_out});
        return transpose12(y4);  // [B,T',N,C_out]
    }

    // full pipeline: assemble -> (SCCI -> transpose -> TCCI -> TSI ->
    // transpose -> SSI) x blocks -> fuse
    Var forward(ForwardCtx& ctx, const ModelInput& input, Parameter& prompt,
                AttentionMaps* maps = nullptr) {
        Var e_obs = embed_observations(ctx, input.x_obs);
        Var e_s = embed_spatial(ctx, input.coords_norm);
        Var e_t3 = embed_temporal(ctx, input.tod, input.dow, input.ts);
        std::size_t b = input.batch;
        Var e_t = reshape(e_t3, {b, cfg_.input_len, cfg_.layout.d_t});
        Var p_n = prompt_rows(ctx, prompt);
        Var h = assemble_representation(ctx, e_obs, e_s, e_t, p_n);
        for (std::size_t blk = 0; blk < cfg_.attn.blocks; ++blk) {
            if (cfg_.use_cross_context) h = scci(ctx, h, blk, maps);
            Var ht = transpose12(h);
            if (cfg_.use_cross_context) ht = tcci(ctx, ht, blk, maps);
            ht = tsi(ctx, ht, blk, maps);
            h = transpose12(ht);
            h = ssi(ctx, h, blk, maps);
        }
        return fuse_and_predict(ctx, h);
    }

    const Tensor& pe_table() const { return pe_; }

private:
    ModelConfig cfg_;
    ParameterStore store_;
    Tensor pe_;

    Parameter *obs_w1_, *obs_b1_, *obs_w2_, *obs_b2_;
    Parameter *sp_w_, *sp_b_;
    Parameter *tm_dow_, *tm_tod_, *tm_ts_w_, *tm_ts_b_, *tm_out_w_, *tm_out_b_;
    struct BlockParams {
        detail::AttnParams scci_so, scci_os, tcci_to, tcci_ot, tsi, ssi;
    };
    std::vector<BlockParams> blocks_;
    Parameter *fuse_wo_, *fuse_ws_, *fuse_wt_, *fuse_wz_, *fuse_wp_;
    Parameter *out_w_, *out_b_;

    static std::string stage_name(const char* base, std::size_t block) {
        std::string s = base;
        if (block > 0) s += "@b" + std::to_string(block);
        return s;
    }

    Parameter* add_weight(Rng& rng, const std::string& name, std::size_t fan_in,
                          std::size_t fan_out) {
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor t = Tensor::zeros({fan_in, fan_out});
        for (double& v : t.data) v = rng.uniform(-limit, limit);
        return &store_.add(name, std::move(t));
    }

    Parameter* add_vector(const std::string& name, std::size_t n, double fill) {
        return &store_.add(name, Tensor::full({n}, fill));
    }

    detail::AttnParams add_attn(Rng& rng, const std::string& prefix, std::size_t d_q,
                                std::size_t d_kv, std::size_t width, std::size_t d_out) {
        detail::AttnParams p;
        p.wq = add_weight(rng, prefix + "/wq", d_q, width);
        p.wk = add_weight(rng, prefix + "/wk", d_kv, width);
        p.wv = add_weight(rng, prefix + "/wv", d_kv, width);
        p.wo = add_weight(rng, prefix + "/wo", width, d_out);
        p.ln1_g = add_vector(prefix + "/ln1_g", d_out, 1.0);
        p.ln1_b = add_vector(prefix + "/ln1_b", d_out, 0.0);
        p.ln2_g = add_vector(prefix + "/ln2_g", d_out, 1.0);
        p.ln2_b = add_vector(prefix + "/ln2_b", d_out, 0.0);
        p.ffn_w1 = add_weight(rng, prefix + "/ffn_w1", d_out, cfg_.attn.ffn_hidden);
        p.ffn_b1 = add_vector(prefix + "/ffn_b1", cfg_.attn.ffn_hidden, 0.0);
        p.ffn_w2 = add_weight(rng, prefix + "/ffn_w2", cfg_.attn.ffn_hidden, d_out);
        p.ffn_b2 = add_vector(prefix + "/ffn_b2", d_out, 0.0);
        return p;
    }

    void register_params(Rng& rng) {
        const SliceLayout& L = cfg_.layout;
        obs_w1_ = add_weight(rng, "embed/obs/w1", cfg_.c_in, cfg_.h_obs);
        obs_b1_ = add_vector("embed/obs/b1", cfg_.h_obs, 0.0);
        obs_w2_ = add_weight(rng, "embed/obs/w2", cfg_.h_obs, L.d_obs);
        obs_b2_ = add_vector("embed/obs/b2", L.d_obs, 0.0);
        sp_w_ = add_weight(rng, "embed/spatial/w", 2, L.d_s);
        sp_b_ = add_vector("embed/spatial/b", L.d_s, 0.0);
        tm_dow_ = add_weight(rng, "embed/temporal/dow_table", 7, 16);
        tm_tod_ = add_weight(rng, "embed/temporal/tod_table", cfg_.slots_per_day, 16);
        tm_ts_w_ = add_weight(rng, "embed/temporal/ts_w", 6, 16);
        tm_ts_b_ = add_vector("embed/temporal/ts_b", 16, 0.0);
        tm_out_w_ = add_weight(rng, "embed/temporal/out_w", 48, L.d_t);
        tm_out_b_ = add_vector("embed/temporal/out_b", L.d_t, 0.0);

        blocks_.resize(cfg_.attn.blocks);
        for (std::size_t i = 0; i < cfg_.attn.blocks; ++i) {
            std::string base = "msti/b" + std::to_string(i);
            if (cfg_.use_cross_context) {
                blocks_[i].scci_so =
                    add_attn(rng, base + "/scci_so", L.d_s, L.d_obs, cfg_.attn.d_cross, L.d_obs);
                blocks_[i].scci_os =
                    add_attn(rng, base + "/scci_os", L.d_obs, L.d_s, cfg_.attn.d_cross, L.d_s);
                blocks_[i].tcci_to =
                    add_attn(rng, base + "/tcci_to", L.d_t, L.d_obs, cfg_.attn.d_cross, L.d_obs);
                if (cfg_.tcci_bidirectional)
                    blocks_[i].tcci_ot =
                        add_attn(rng, base + "/tcci_ot", L.d_obs, L.d_t, cfg_.attn.d_cross, L.d_t);
            }
            blocks_[i].tsi =
                add_attn(rng, base + "/tsi", L.d_h(), L.d_h(), cfg_.attn.d_self, L.d_h());
            blocks_[i].ssi =
                add_attn(rng, base + "/ssi", L.d_h(), L.d_h(), cfg_.attn.d_self, L.d_h());
        }

        fuse_wo_ = add_weight(rng, "head/fuse/wo", L.d_obs, cfg_.d_f);
        fuse_ws_ = add_weight(rng, "head/fuse/ws", L.d_s, cfg_.d_f);
        fuse_wt_ = add_weight(rng, "head/fuse/wt", L.d_t, cfg_.d_f);
        fuse_wz_ = add_weight(rng, "head/fuse/wz", cfg_.d_f, cfg_.d_y);
        fuse_wp_ = add_weight(rng, "head/fuse/wp", L.d_p, cfg_.d_y);
        out_w_ = add_weight(rng, "head/out/w", cfg_.input_len * cfg_.d_y,
                            cfg_.horizon * cfg_.c_out);
        out_b_ = add_vector("head/out/b", cfg_.horizon * cfg_.c_out, 0.0);
    }

    Var add_positional_encoding(const Var& ht) {
        const SliceLayout& L = cfg_.layout;
        Var s_o = slice_last(ht, L.obs_offset(), L.d_obs);
        Var s_s = slice_last(ht, L.s_offset(), L.d_s);
        Var s_t = add_tail2(slice_last(ht, L.t_offset(), L.d_t), pe_);
        Var s_p = slice_last(ht, L.p_offset(), L.d_p);
        return concat_last({s_o, s_s, s_t, s_p});
    }

    // softmax(Q K^T / sqrt(dk)) V per head, heads concatenated, projected by
    // wo to d_out
    Var attention_core(ForwardCtx& ctx, const Var& q_src, const Var& kv_src,
                       const detail::AttnParams& p, std::size_t width, std::size_t d_out,
                       const std::string& stage, const std::string& axis, AttentionMaps* maps) {
        const Shape& s = q_src.shape();
        std::size_t groups = s[0] * s[1], len = s[2];
        Var q = reshape(matmul(q_src, ctx.use(*p.wq)), {groups, len, width});
        Var k = reshape(matmul(kv_src, ctx.use(*p.wk)), {groups, len, width});
        Var v = reshape(matmul(kv_src, ctx.use(*p.wv)), {groups, len, width});
        std::size_t heads = cfg_.attn.heads;
        std::size_t dk = width / heads;
        double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
        AttentionMaps::Stage* capture = nullptr;
        if (maps) {
            maps->stages.push_back({stage, axis, len, s[1], {}});
            capture = &maps->stages.back();
        }
        std::vector<Var> contexts;
        contexts.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Var qh = slice_last(q, h * dk, dk);
            Var kh = slice_last(k, h * dk, dk);
            Var vh = slice_last(v, h * dk, dk);
            Var scores = softmax_last(scale(bmm_nt(qh, kh), inv_sqrt));
            if (capture) capture->per_head.push_back(scores.value());
            contexts.push_back(bmm(scores, vh));
        }
        Var cat = heads == 1 ? contexts[0] : concat_last(contexts);
        Var o = matmul(cat, ctx.use(*p.wo));
        return reshape(o, {s[0], s[1], len, d_out});
    }

    // Residual + double layer norm + FFN structure applied to the updated
    // slice: A = MHCA + residual; B = LN1(A); out = LN2(FFN(B) + B).
    Var eq6_structure(ForwardCtx& ctx, const Var& mh_out, const Var& residual,
                      const detail::AttnParams& p) {
        Var a = add(mh_out, residual);
        Var b = layer_norm_last(a, ctx.use(*p.ln1_g), ctx.use(*p.ln1_b), cfg_.ln_eps);
        Var f = add_bias(
            matmul(relu(add_bias(matmul(b, ctx.use(*p.ffn_w1)), ctx.use(*p.ffn_b1))),
                   ctx.use(*p.ffn_w2)),
            ctx.use(*p.ffn_b2));
        return layer_norm_last(add(f, b), ctx.use(*p.ln2_g), ctx.use(*p.ln2_b), cfg_.ln_eps);
    }

    // One cross-interaction direction. Writes back only into the kv slice;
    // every other slice of H is carried through bit-identical.
    Var cross_attention_block(ForwardCtx& ctx, const Var& h, std::size_t q_off, std::size_t q_w,
                              std::size_t kv_off, std::size_t kv_w, const detail::AttnParams& p,
                              const std::string& stage, const std::string& axis,
                              AttentionMaps* maps) {
        Var hq = slice_last(h, q_off, q_w);
        Var hkv = slice_last(h, kv_off, kv_w);
        Var mh = attention_core(ctx, hq, hkv, p, cfg_.attn.d_cross, kv_w, stage, axis, maps);
        Var updated = eq6_structure(ctx, mh, hkv, p);
        const SliceLayout& L = cfg_.layout;
        std::array<std::pair<std::size_t, std::size_t>, 4> slices{
            std::pair{L.obs_offset(), L.d_obs}, std::pair{L.s_offset(), L.d_s},
            std::pair{L.t_offset(), L.d_t}, std::pair{L.p_offset(), L.d_p}};
        std::vector<Var> parts;
        for (auto [off, w] : slices)
            parts.push_back(off == kv_off ? updated : slice_last(h, off, w));
        return concat_last(parts);
    }

    // Full-width self-interaction with the same Eq. 6-style structure.
    Var self_attention_block(ForwardCtx& ctx, const Var& h, const detail::AttnParams& p,
                             const std::string& stage, const std::string& axis,
                             AttentionMaps* maps) {
        Var mh = attention_core(ctx, h, h, p, cfg_.attn.d_self, cfg_.layout.d_h(), stage, axis,
                                maps);
        return eq6_structure(ctx, mh, h, p);
    }
};

}  // namespace cmust
