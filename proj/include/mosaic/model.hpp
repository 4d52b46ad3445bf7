#pragma once

// The forecast network: input embedding on the lat-lon grid, interpolation
// onto the finest HEALPix stage, a U-Net of block-sparse transformer blocks
// joined by quad-tree coarsening and refinement, interpolation back to the
// grid and an output head predicting the next normalised state.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mosaic/attention.hpp"
#include "mosaic/config.hpp"
#include "mosaic/geometry.hpp"
#include "mosaic/healpix.hpp"
#include "mosaic/interp.hpp"
#include "mosaic/msgt.hpp"
#include "mosaic/ops.hpp"
#include "mosaic/params.hpp"
#include "mosaic/tape.hpp"

namespace mosaic::model {

struct StageConfig {
    std::size_t nside = 16;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t enc_depth = 2;
    std::size_t dec_depth = 1;
    std::size_t local_block = 256;
    std::size_t sparse_block = 64;
    std::size_t top_n = 6;

    std::string str() const {
        return std::to_string(nside) + ":" + std::to_string(d_model) + ":" + std::to_string(heads) + ":" +
               std::to_string(enc_depth) + ":" + std::to_string(dec_depth) + ":" + std::to_string(local_block) +
               ":" + std::to_string(sparse_block) + ":" + std::to_string(top_n);
    }

    static StageConfig parse(const std::string& s) {
        const auto f = split(s, ':');
        if (f.size() != 8)
            throw ConfigError("stage '" + s + "' must be nside:d_model:heads:enc:dec:local_block:sparse_block:top_n");
        std::vector<std::size_t> v;
        for (const auto& x : f) {
            try {
                v.push_back(static_cast<std::size_t>(std::stoull(x)));
            } catch (const std::exception&) {
                throw ConfigError("stage field '" + x + "' is not an integer");
            }
        }
        return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    }
};

// Per-grid-point input width: T history frames of C_dyn channels, static
// channels (coordinates included) and four time features.
inline std::size_t input_width(std::size_t history, std::size_t dyn_channels, std::size_t static_channels) {
    return history * dyn_channels + static_channels + 4;
}

struct ModelConfig {
    std::size_t grid_h = 32;
    std::size_t grid_w = 64;
    std::size_t history = 2;
    std::size_t dyn_channels = 3;
    std::size_t static_channels = 4;
    std::size_t noise_dim = 8;
    std::size_t mlp_ratio = 2;
    std::size_t interp_k = 24;
    std::size_t gqa_ratio = 2;
    double rope_theta = 10000.0;
    bool residual_prediction = false;
    // Successive stages halve nside; the last one is the bottleneck.
    std::vector<StageConfig> stages;

    static ModelConfig desk_default() {
        ModelConfig c;
        c.stages = {{16, 64, 4, 2, 1, 256, 64, 6}, {8, 96, 6, 2, 1, 256, 64, 4}, {4, 128, 8, 1, 0, 192, 64, 2}};
        return c;
    }

    // Small enough to train for thousands of steps on one core.
    static ModelConfig toy() {
        ModelConfig c;
        c.grid_h = 16;
        c.grid_w = 32;
        c.noise_dim = 8;
        c.interp_k = 8;
        c.stages = {{8, 32, 2, 1, 1, 64, 16, 4}, {4, 48, 3, 1, 1, 64, 16, 2}, {2, 64, 4, 1, 0, 48, 16, 1}};
        c.gqa_ratio = 1;
        return c;
    }

    std::size_t input_width() const { return model::input_width(history, dyn_channels, static_channels); }
    std::size_t grid_points() const { return grid_h * grid_w; }

    attn::AttentionConfig attention(std::size_t stage) const {
        const StageConfig& s = stages.at(stage);
        attn::AttentionConfig a;
        a.num_heads = s.heads;
        a.gqa_ratio = gqa_ratio;
        a.head_dim = s.heads ? s.d_model / s.heads : 0;
        a.local_block = s.local_block;
        a.sparse_block = s.sparse_block;
        a.top_n = s.top_n;
        a.rope_theta = rope_theta;
        return a;
    }

    void validate() const {
        if (stages.empty()) throw ConfigError("model needs at least one stage");
        if (grid_h == 0 || grid_w == 0) throw ConfigError("grid dimensions must be positive");
        if (history == 0 || dyn_channels == 0) throw ConfigError("history and dyn_channels must be positive");
        if (noise_dim == 0 || mlp_ratio == 0) throw ConfigError("noise_dim and mlp_ratio must be positive");
        for (std::size_t s = 0; s < stages.size(); ++s) {
            const StageConfig& st = stages[s];
            healpix::require_nside(st.nside);
            if (s > 0 && st.nside * 2 != stages[s - 1].nside)
                throw ConfigError("stage " + std::to_string(s) + " nside must be half of the previous stage");
            if (st.heads == 0 || st.d_model % st.heads != 0)
                throw ConfigError("stage " + std::to_string(s) + ": heads must divide d_model");
            if (st.enc_depth == 0) throw ConfigError("stage " + std::to_string(s) + " needs at least one encoder block");
            if (s + 1 == stages.size() && st.dec_depth != 0)
                throw ConfigError("the bottleneck stage has no decoder blocks; set its dec depth to 0");
            attention(s).validate(healpix::npix(st.nside));
        }
        if (interp_k == 0 || interp_k > grid_points() || interp_k > healpix::npix(stages[0].nside))
            throw ConfigError("interp_k must be between 1 and the smaller of grid and mesh sizes");
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("grid_h", std::to_string(grid_h));
        kv.set("grid_w", std::to_string(grid_w));
        kv.set("history", std::to_string(history));
        kv.set("dyn_channels", std::to_string(dyn_channels));
        kv.set("static_channels", std::to_string(static_channels));
        kv.set("noise_dim", std::to_string(noise_dim));
        kv.set("mlp_ratio", std::to_string(mlp_ratio));
        kv.set("interp_k", std::to_string(interp_k));
        kv.set("gqa_ratio", std::to_string(gqa_ratio));
        std::ostringstream theta;
        theta << rope_theta;
        kv.set("rope_theta", theta.str());
        kv.set("residual_prediction", residual_prediction ? "true" : "false");
        std::string st;
        for (std::size_t i = 0; i < stages.size(); ++i) st += (i ? "," : "") + stages[i].str();
        kv.set("stages", st);
        return kv;
    }

    // Missing keys keep the values of `base`.
    static ModelConfig from_kv(const KeyValues& kv, const ModelConfig& base = desk_default()) {
        ModelConfig c = base;
        c.grid_h = kv.size_value("grid_h", c.grid_h);
        c.grid_w = kv.size_value("grid_w", c.grid_w);
        c.history = kv.size_value("history", c.history);
        c.dyn_channels = kv.size_value("dyn_channels", c.dyn_channels);
        c.static_channels = kv.size_value("static_channels", c.static_channels);
        c.noise_dim = kv.size_value("noise_dim", c.noise_dim);
        c.mlp_ratio = kv.size_value("mlp_ratio", c.mlp_ratio);
        c.interp_k = kv.size_value("interp_k", c.interp_k);
        c.gqa_ratio = kv.size_value("gqa_ratio", c.gqa_ratio);
        c.rope_theta = kv.real("rope_theta", c.rope_theta);
        c.residual_prediction = kv.flag("residual_prediction", c.residual_prediction);
        if (kv.has("stages")) {
            c.stages.clear();
            for (const auto& s : split(kv.str("stages", ""), ',')) c.stages.push_back(StageConfig::parse(s));
        }
        c.validate();
        return c;
    }
};

// One forecast input: T normalised frames [T, H, W, C_dyn], static fields
// [H, W, C_static] and the four time features of the target time.
template <class T>
struct ModelInput {
    Tensor<T> history;
    Tensor<T> statics;
    Tensor<T> time;
};

// ---- building blocks ----------------------------------------------------

// Pre-norm parent features: children [4 Np, d] (rows 4p..4p+3 belong to
// parent p), offsets [Np, 12] of child minus parent centres.
template <class T>
Var<T> coarsen_linear(Var<T> children, Var<T> offsets, Var<T> wx, Var<T> wp) {
    const auto& C = children.value();
    if (C.rank() != 2 || C.dim(0) % 4 != 0)
        throw DimensionError("coarsen expects four children per parent, got " + shape_str(C.shape()));
    const std::size_t np = C.dim(0) / 4;
    if (offsets.dim(0) != np || offsets.dim(1) != 12)
        throw DimensionError("coarsen offsets " + shape_str(offsets.shape()) + " do not match " + std::to_string(np) +
                             " parents");
    return add(matmul(reshape(children, Shape{np, 4 * C.dim(1)}), wx), matmul(offsets, wp));
}

template <class T>
Var<T> coarsen(Var<T> children, Var<T> offsets, Var<T> wx, Var<T> wp) {
    return rmsnorm(coarsen_linear(children, offsets, wx, wp));
}

// Child features [4 Np, d] from parents [Np, D]: wx [D, 4d], wp [12, 4d],
// skip [4 Np, d] from the encoder at the child level.
template <class T>
Var<T> refine(Var<T> parent, Var<T> offsets, Var<T> wx, Var<T> wp, Var<T> skip) {
    const std::size_t np = parent.dim(0);
    const std::size_t width = wx.dim(1);
    if (width % 4 != 0) throw DimensionError("refine projection width must split into four children");
    Var<T> up = add(matmul(parent, wx), matmul(offsets, wp));
    Var<T> children = reshape(up, Shape{4 * np, width / 4});
    return rmsnorm(add(children, skip));
}

template <class T>
struct BlockWeights {
    attn::BsaWeights<T> attn;
    Var<T> ffn_gate, ffn_value, ffn_out;  // [d, hidden], [d, hidden], [hidden, d]
    Var<T> ffn_noise;                      // [noise_dim, hidden]
};

// x + BSA(RMSNorm x), then x + cSwiGLU(RMSNorm x, z' W_n).
template <class T>
Var<T> transformer_block(Var<T> x, const BlockWeights<T>& w, const attn::AttentionConfig& cfg,
                         const attn::TokenPositions& pos, const attn::RopeTable* rope, Var<T> z_prime) {
    x = add(x, attn::bsa_forward(rmsnorm(x), w.attn, cfg, pos, rope).out);
    Var<T> bias = matmul(z_prime, w.ffn_noise);
    return add(x, swiglu_gated(rmsnorm(x), bias, w.ffn_gate, w.ffn_value, w.ffn_out));
}

// ---- full network -------------------------------------------------------

template <class T>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), grid_(cfg_.grid_h, cfg_.grid_w) {
        cfg_.validate();
        for (const auto& s : cfg_.stages) {
            meshes_.emplace_back(s.nside);
            positions_.push_back(attn::TokenPositions::from_mesh(meshes_.back()));
            ropes_.emplace_back(positions_.back(), s.d_model / s.heads, cfg_.rope_theta);
        }
        for (std::size_t s = 0; s + 1 < meshes_.size(); ++s)
            offsets_.push_back(meshes_[s + 1].template child_offsets<T>(meshes_[s]));
        const auto grid_pts = grid_.points();
        to_mesh_ = interp::InterpGeometry<T>::build(meshes_[0].centers(), grid_pts, cfg_.interp_k);
        to_grid_ = interp::InterpGeometry<T>::build(grid_pts, meshes_[0].centers(), cfg_.interp_k);
    }

    const ModelConfig& config() const { return cfg_; }
    const LatLonGrid& grid() const { return grid_; }
    const healpix::HealpixMesh& mesh(std::size_t stage) const { return meshes_.at(stage); }
    const Tensor<T>& child_offsets(std::size_t stage) const { return offsets_.at(stage); }

    std::vector<ParamSpec> param_specs() const {
        std::vector<ParamSpec> specs;
        const double small = 0.01;
        auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
            specs.push_back({name, {in, out}, linear_init_std(in, out)});
        };
        auto residual = [&](const std::string& name, std::size_t in, std::size_t out) {
            specs.push_back({name, {in, out}, small});
        };
        auto bias = [&](const std::string& name, std::size_t n) { specs.push_back({name, {n}, 0.0}); };

        const std::size_t d0 = cfg_.stages[0].d_model;
        linear("embed.w1", cfg_.input_width(), d0);
        bias("embed.b1", d0);
        linear("embed.w2", d0, d0);
        bias("embed.b2", d0);
        for (const char* dir : {"in_interp", "out_interp"}) {
            const std::string p = dir;
            linear(p + ".wq", 3, d0);
            linear(p + ".wk", d0, d0);
            linear(p + ".wv", d0, d0);
            linear(p + ".wo", d0, d0);
        }
        residual("noise.wz", cfg_.noise_dim, cfg_.noise_dim);
        for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
            const StageConfig& st = cfg_.stages[s];
            const auto a = cfg_.attention(s);
            const std::size_t d = st.d_model, hd = a.head_dim, hidden = cfg_.mlp_ratio * d;
            auto block = [&](const std::string& p) {
                linear(p + ".attn.wq", d, st.heads * hd);
                linear(p + ".attn.wk", d, a.kv_heads() * hd);
                linear(p + ".attn.wv", d, a.kv_heads() * hd);
                residual(p + ".attn.wo", st.heads * hd, d);
                linear(p + ".attn.wgate", d, 3 * st.heads);
                residual(p + ".ffn.wg", d, hidden);
                residual(p + ".ffn.wv", d, hidden);
                linear(p + ".ffn.wo", hidden, d);
                residual(p + ".ffn.wn", cfg_.noise_dim, hidden);
            };
            for (std::size_t j = 0; j < st.enc_depth; ++j) block(block_name(s, "enc", j));
            for (std::size_t j = 0; j < st.dec_depth; ++j) block(block_name(s, "dec", j));
            if (s + 1 < cfg_.stages.size()) {
                const std::size_t dn = cfg_.stages[s + 1].d_model;
                linear("down" + std::to_string(s) + ".wx", 4 * d, dn);
                linear("down" + std::to_string(s) + ".wp", 12, dn);
                residual("up" + std::to_string(s) + ".wx", dn, 4 * d);
                residual("up" + std::to_string(s) + ".wp", 12, 4 * d);
            }
        }
        linear("head.w1", d0, d0);
        bias("head.b1", d0);
        linear("head.w2", d0, cfg_.dyn_channels);
        bias("head.b2", cfg_.dyn_channels);
        return specs;
    }

    ParamStore<T> init_params(std::uint64_t seed) const { return sample_params<T>(param_specs(), seed); }

    static std::string block_name(std::size_t stage, const char* part, std::size_t j) {
        return "s" + std::to_string(stage) + "." + part + std::to_string(j);
    }

    BlockWeights<T> block_weights(ParamBinding<T>& p, const std::string& prefix) const {
        return {{p(prefix + ".attn.wq"), p(prefix + ".attn.wk"), p(prefix + ".attn.wv"), p(prefix + ".attn.wo"),
                 p(prefix + ".attn.wgate")},
                p(prefix + ".ffn.wg"),
                p(prefix + ".ffn.wv"),
                p(prefix + ".ffn.wo"),
                p(prefix + ".ffn.wn")};
    }

    Var<T> block(ParamBinding<T>& p, std::size_t stage, const std::string& prefix, Var<T> x, Var<T> z_prime) const {
        return transformer_block(x, block_weights(p, prefix), cfg_.attention(stage), positions_[stage], &ropes_[stage],
                                 z_prime);
    }

    // Per-grid-point feature rows [H*W, input_width].
    Tensor<T> input_features(const ModelInput<T>& in) const {
        const std::size_t hw = cfg_.grid_points(), C = cfg_.dyn_channels, S = cfg_.static_channels;
        if (in.history.shape() != Shape{cfg_.history, cfg_.grid_h, cfg_.grid_w, C})
            throw DimensionError("history " + shape_str(in.history.shape()) + " does not match [T, H, W, C_dyn] = " +
                                 shape_str({cfg_.history, cfg_.grid_h, cfg_.grid_w, C}));
        if (in.statics.shape() != Shape{cfg_.grid_h, cfg_.grid_w, S})
            throw DimensionError("statics " + shape_str(in.statics.shape()) + " do not match the grid");
        if (in.time.size() != 4) throw DimensionError("time embedding must have four values");
        const std::size_t width = cfg_.input_width();
        Tensor<T> f(Shape{hw, width});
        for (std::size_t i = 0; i < hw; ++i) {
            T* row = f.data() + i * width;
            for (std::size_t t = 0; t < cfg_.history; ++t)
                for (std::size_t c = 0; c < C; ++c) *row++ = in.history[(t * hw + i) * C + c];
            for (std::size_t c = 0; c < S; ++c) *row++ = in.statics[i * S + c];
            for (std::size_t c = 0; c < 4; ++c) *row++ = in.time[c];
        }
        return f;
    }

    Var<T> embed(ParamBinding<T>& p, const ModelInput<T>& in) const {
        Var<T> x = p.tape().constant(input_features(in));
        x = silu(rmsnorm(add_bias(matmul(x, p("embed.w1")), p("embed.b1"))));
        return rmsnorm(add_bias(matmul(x, p("embed.w2")), p("embed.b2")));
    }

    // Next normalised state [H, W, C_dyn] for one noise vector z.
    Var<T> forward(ParamBinding<T>& p, const ModelInput<T>& in, const Tensor<T>& z) const {
        if (z.size() != cfg_.noise_dim)
            throw DimensionError("noise vector has " + std::to_string(z.size()) + " values, expected " +
                                 std::to_string(cfg_.noise_dim));
        Tape<T>& tape = p.tape();
        Var<T> x = embed(p, in);
        x = interp::interpolate(x, to_mesh_,
                                {p("in_interp.wq"), p("in_interp.wk"), p("in_interp.wv"), p("in_interp.wo")});
        Var<T> z_prime = matmul(tape.constant(z.reshaped({1, cfg_.noise_dim})), p("noise.wz"));

        const std::size_t S = cfg_.stages.size();
        std::vector<Var<T>> skips;
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t j = 0; j < cfg_.stages[s].enc_depth; ++j)
                x = block(p, s, block_name(s, "enc", j), x, z_prime);
            if (s + 1 < S) {
                skips.push_back(x);
                const std::string n = "down" + std::to_string(s);
                x = coarsen(x, tape.constant(offsets_[s]), p(n + ".wx"), p(n + ".wp"));
            }
        }
        for (std::size_t s = S - 1; s-- > 0;) {
            const std::string n = "up" + std::to_string(s);
            x = refine(x, tape.constant(offsets_[s]), p(n + ".wx"), p(n + ".wp"), skips[s]);
            for (std::size_t j = 0; j < cfg_.stages[s].dec_depth; ++j)
                x = block(p, s, block_name(s, "dec", j), x, z_prime);
        }

        x = interp::interpolate(rmsnorm(x), to_grid_,
                                {p("out_interp.wq"), p("out_interp.wk"), p("out_interp.wv"), p("out_interp.wo")});
        x = silu(add_bias(matmul(rmsnorm(x), p("head.w1")), p("head.b1")));
        x = add_bias(matmul(x, p("head.w2")), p("head.b2"));
        if (cfg_.residual_prediction) {
            const std::size_t hw = cfg_.grid_points(), C = cfg_.dyn_channels;
            Tensor<T> last(Shape{hw, C});
            std::copy_n(in.history.data() + (cfg_.history - 1) * hw * C, hw * C, last.data());
            x = add(x, tape.constant(std::move(last)));
        }
        return reshape(x, Shape{cfg_.grid_h, cfg_.grid_w, cfg_.dyn_channels});
    }

private:
    ModelConfig cfg_;
    LatLonGrid grid_;
    std::vector<healpix::HealpixMesh> meshes_;
    std::vector<attn::TokenPositions> positions_;
    std::vector<attn::RopeTable> ropes_;
    std::vector<Tensor<T>> offsets_;  // [N_{s+1}, 12] between stage s and s+1
    interp::InterpGeometry<T> to_mesh_, to_grid_;
};

// Checkpoint directory: manifest + MSGT tensors plus model.cfg.
template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const ParamStore<T>& params) {
    io::save_tensor_dir(dir, params);
    io::write_file(dir / "model.cfg", cfg.to_kv().text());
}

template <class T>
std::pair<ModelConfig, ParamStore<T>> load_checkpoint(const std::filesystem::path& dir) {
    ModelConfig cfg = ModelConfig::from_kv(KeyValues::load(dir / "model.cfg"));
    ParamStore<T> params = io::load_tensor_dir<T>(dir);
    Model<T> probe(cfg);
    for (const auto& s : probe.param_specs()) {
        auto it = params.find(s.name);
        if (it == params.end()) throw io::IoError("checkpoint is missing parameter " + s.name);
        if (it->second.shape() != s.shape)
            throw io::IoError("checkpoint parameter " + s.name + " has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(s.shape));
    }
    return {cfg, std::move(params)};
}

}  // namespace mosaic::model
