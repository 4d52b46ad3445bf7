// mosaic: command-line front end.
//
// Exit codes: 0 ok, 1 unexpected internal error, 2 configuration or usage
// error, 3 numeric failure, 4 I/O error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mosaic/bench.hpp"
#include "mosaic/diagnostics.hpp"
#include "mosaic/healpix.hpp"
#include "mosaic/model.hpp"
#include "mosaic/msgt.hpp"
#include "mosaic/normalize.hpp"
#include "mosaic/spectral.hpp"
#include "mosaic/synth.hpp"
#include "mosaic/training.hpp"

namespace fs = std::filesystem;
using namespace mosaic;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

using Clock = std::chrono::steady_clock;

// Run record written next to every output: inputs, seed, version, the
// effective option values, and wall time (the only non-deterministic line).
class Manifest {
public:
    Manifest(const CLI::App& cmd, std::uint64_t seed) : cmd_(cmd), seed_(seed), start_(Clock::now()) {}

    void add(const std::string& key, const std::string& value) { extra_.emplace_back(key, value); }
    void add(const std::string& key, double value) {
        std::ostringstream os;
        os << std::setprecision(10) << value;
        add(key, os.str());
    }

    void write(const fs::path& path) const {
        std::ostringstream os;
        os << "command = " << cmd_.get_name() << "\n";
        os << "version = " << kVersion << "\n";
        os << "seed = " << seed_ << "\n";
        os << "\n# effective configuration\n" << cmd_.config_to_str(true, false);
        os << "\n# run\n";
        for (const auto& [k, v] : extra_) os << k << " = " << v << "\n";
        os << "wall_time_s = " << std::chrono::duration<double>(Clock::now() - start_).count() << "\n";
        io::write_file(path, os.str());
    }

private:
    const CLI::App& cmd_;
    std::uint64_t seed_;
    Clock::time_point start_;
    std::vector<std::pair<std::string, std::string>> extra_;
};

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io::IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    io::write_file(path, text);
}

// "HxW" grid specification.
std::pair<std::size_t, std::size_t> parse_grid(const std::string& spec) {
    const auto x = spec.find('x');
    if (x == std::string::npos) throw ConfigError("grid must look like 32x64, got '" + spec + "'");
    try {
        return {std::stoul(spec.substr(0, x)), std::stoul(spec.substr(x + 1))};
    } catch (const std::exception&) {
        throw ConfigError("grid must look like 32x64, got '" + spec + "'");
    }
}

// Channel loss weights: "1,1,1" or empty for all ones.
std::vector<double> parse_alpha(const std::string& s, std::size_t channels) {
    std::vector<double> a;
    if (s.empty()) return std::vector<double>(channels, 1.0);
    for (const auto& part : split(s, ',')) {
        try {
            a.push_back(std::stod(part));
        } catch (const std::exception&) {
            throw ConfigError("bad channel weight '" + part + "'");
        }
    }
    if (a.size() != channels)
        throw ConfigError("got " + std::to_string(a.size()) + " channel weights for " + std::to_string(channels) +
                          " channels");
    return a;
}

// Model architecture for a dataset: a preset or a model.cfg file, with the
// grid and channel counts taken from the data.
model::ModelConfig model_for(const std::string& preset, const std::string& stages, const synth::Dataset& ds) {
    model::ModelConfig c;
    if (preset == "toy")
        c = model::ModelConfig::toy();
    else if (preset == "desk")
        c = model::ModelConfig::desk_default();
    else
        c = model::ModelConfig::from_kv(KeyValues::load(preset));
    c.grid_h = ds.config.grid_h;
    c.grid_w = ds.config.grid_w;
    c.dyn_channels = ds.channels();
    c.static_channels = ds.statics.dim(2);
    if (!stages.empty()) {
        c.stages.clear();
        for (const auto& s : split(stages, ',')) c.stages.push_back(model::StageConfig::parse(s));
    }
    c.validate();
    return c;
}

std::string member_file(std::size_t member, std::size_t step) {
    std::ostringstream os;
    os << "member_" << std::setw(3) << std::setfill('0') << member << "_step_" << std::setw(3) << step << ".msgt";
    return os.str();
}

// ---- mesh -----------------------------------------------------------------

struct MeshArgs {
    std::size_t nside = 64;
    std::size_t block = 0;
};

int cmd_mesh(const MeshArgs& a) {
    healpix::require_nside(a.nside);
    const healpix::HealpixMesh mesh(a.nside);
    std::cout << "nside " << a.nside << "\n";
    std::cout << "npix " << mesh.npix() << "\n";
    std::cout << std::fixed << std::setprecision(2) << "resolution " << healpix::resolution_deg(a.nside) << " deg\n";
    if (a.block > 0) {
        const auto part = mesh.blocks(a.block);
        double worst = 0;
        for (std::size_t b = 0; b < part.count(); ++b) worst = std::max(worst, mesh.block_diameter(part, b));
        std::cout << "blocks " << part.count() << " of " << a.block << "\n";
        std::cout << std::setprecision(4) << "max_block_diameter " << worst << " rad\n";
    }
    return kOk;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    std::string grid = "32x64";
    synth::SynthConfig cfg;
};

int cmd_synth(const CLI::App& cmd, SynthArgs a) {
    std::tie(a.cfg.grid_h, a.cfg.grid_w) = parse_grid(a.grid);
    a.cfg.validate();
    Manifest m(cmd, a.cfg.seed);
    const auto ds = synth::generate(a.cfg);
    synth::save_dataset(a.out, ds);
    m.add("states", std::to_string(ds.steps()));
    m.write(fs::path(a.out) / "run.manifest");
    std::cout << "wrote " << ds.steps() << " states to " << a.out << "\n";
    return kOk;
}

// ---- train / finetune ---------------------------------------------------------

struct TrainArgs {
    std::string data, out, init;
    std::string model = "toy";
    std::string stages;
    std::string alpha;
    std::size_t val_windows = 16;
    std::size_t val_members = 2;
    std::size_t log_every = 50;
    train::TrainConfig cfg;
    std::string orthogonalizer = "newton";
};

int cmd_train(const CLI::App& cmd, TrainArgs a, bool finetune) {
    a.cfg.muon.method = train::parse_orthogonalizer(a.orthogonalizer);
    a.cfg.validate();
    Manifest m(cmd, a.cfg.seed);
    const auto ds = synth::load_dataset(a.data);

    model::ModelConfig mc;
    ParamStore<float> params;
    if (finetune) {
        std::tie(mc, params) = model::load_checkpoint<float>(a.init);
        if (mc.grid_h != ds.config.grid_h || mc.grid_w != ds.config.grid_w || mc.dyn_channels != ds.channels())
            throw ConfigError("checkpoint grid or channels do not match the dataset");
        m.add("init", a.init);
    } else {
        mc = model_for(a.model, a.stages, ds);
        params = model::Model<float>(mc).init_params(a.cfg.seed);
    }
    const model::Model<float> net(mc);
    const train::WindowedData<float> data(ds, mc.history, a.cfg.train_fraction);
    const auto weights = train::LossWeights::for_grid(ds.grid(), parse_alpha(a.alpha, ds.channels()))
                             .table<float>(ds.config.grid_w);

    const std::uint64_t val_seed = mix_seed(a.cfg.seed, 0x7a1);
    const double val0 = train::validation_loss(net, params, data, weights, a.val_members, a.val_windows, val_seed,
                                               a.cfg.rollout);
    std::cout << "validation CRPS before: " << val0 << std::endl;

    ensure_dir(a.out);
    std::ofstream log(fs::path(a.out) / "train_log.csv");
    if (!log) throw io::IoError("cannot write " + (fs::path(a.out) / "train_log.csv").string());
    log << "step,loss,grad_norm,lr,tape_nodes\n";
    std::size_t peak_nodes = 0;
    train::train(net, params, data, a.cfg, weights, [&](const train::StepLog& s) {
        log << s.step << ',' << s.loss << ',' << s.grad_norm << ',' << s.lr << ',' << s.tape_nodes << '\n';
        peak_nodes = std::max(peak_nodes, s.tape_nodes);
        if (a.log_every && (s.step % a.log_every == 0 || s.step + 1 == a.cfg.steps))
            std::cout << "step " << s.step << " loss " << s.loss << " lr " << s.lr << std::endl;
    });
    const double val1 = train::validation_loss(net, params, data, weights, a.val_members, a.val_windows, val_seed,
                                               a.cfg.rollout);
    std::cout << "validation CRPS after: " << val1 << " (" << std::fixed << std::setprecision(1)
              << 100 * (1 - val1 / val0) << "% lower)" << std::endl;

    model::save_checkpoint(a.out, mc, params);
    io::save_msgt(fs::path(a.out) / "norm.msgt", data.stats().to_tensor());
    m.add("data", a.data);
    m.add("val_crps_initial", val0);
    m.add("val_crps_final", val1);
    m.add("peak_tape_nodes", std::to_string(peak_nodes));
    m.write(fs::path(a.out) / "run.manifest");
    return kOk;
}

// ---- forecast -------------------------------------------------------------------

struct ForecastArgs {
    std::string ckpt, data, out;
    std::size_t members = 24;
    std::size_t steps = 10;
    long origin = -1;
    std::uint64_t seed = 0;
};

int cmd_forecast(const CLI::App& cmd, const ForecastArgs& a) {
    Manifest m(cmd, a.seed);
    const auto [mc, params] = model::load_checkpoint<float>(a.ckpt);
    const auto stats = train::NormStats::from_tensor(io::load_msgt<double>(fs::path(a.ckpt) / "norm.msgt"));
    const auto ds = synth::load_dataset(a.data);
    if (mc.grid_h != ds.config.grid_h || mc.grid_w != ds.config.grid_w || mc.dyn_channels != ds.channels())
        throw ConfigError("checkpoint grid or channels do not match the dataset");
    const std::size_t H = mc.grid_h, W = mc.grid_w, C = mc.dyn_channels;
    // Default origin: the first frame after the training split.
    const std::size_t origin =
        a.origin >= 0 ? static_cast<std::size_t>(a.origin)
                      : std::max<std::size_t>(mc.history - 1, static_cast<std::size_t>(0.8 * static_cast<double>(ds.steps())));
    if (origin + 1 < mc.history || origin >= ds.steps())
        throw ConfigError("origin " + std::to_string(origin) + " leaves the dataset");

    model::ModelInput<float> init{Tensor<float>(Shape{mc.history, H, W, C}), Tensor<float>(ds.statics.shape()),
                                  Tensor<float>()};
    for (std::size_t h = 0; h < mc.history; ++h) {
        const auto f = stats.normalize<float>(ds.frame(origin + 1 - mc.history + h));
        std::copy_n(f.data(), f.size(), init.history.data() + h * f.size());
    }
    for (std::size_t i = 0; i < ds.statics.size(); ++i) init.statics[i] = static_cast<float>(ds.statics[i]);
    auto time_at = [&](std::size_t k) {
        const auto t = synth::time_features(origin + k, ds.config.day_period, ds.config.year_period);
        Tensor<float> out(t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]);
        return out;
    };
    init.time = time_at(1);

    const model::Model<float> net(mc);
    const auto ens = train::generate_ensemble(net, params, init, time_at, a.members, a.steps, a.seed);
    ensure_dir(a.out);
    for (std::size_t mem = 0; mem < a.members; ++mem)
        for (std::size_t s = 0; s < a.steps; ++s) {
            const auto phys = stats.denormalize(ens.at(mem, s));
            for (double v : phys.values())
                if (!std::isfinite(v)) throw NumericError("forecast produced non-finite values");
            io::save_msgt(fs::path(a.out) / member_file(mem, s + 1), phys);
        }
    m.add("checkpoint", a.ckpt);
    m.add("data", a.data);
    m.add("origin", std::to_string(origin));
    m.add("members", std::to_string(a.members));
    m.add("steps", std::to_string(a.steps));
    m.write(fs::path(a.out) / "run.manifest");
    std::cout << "wrote " << a.members * a.steps << " member-step files to " << a.out << "\n";
    return kOk;
}

// ---- eval ---------------------------------------------------------------------------

struct EvalArgs {
    std::string forecast, truth, report;
};

int cmd_eval(const CLI::App& cmd, const EvalArgs& a) {
    Manifest m(cmd, 0);
    const auto fm = KeyValues::load(fs::path(a.forecast) / "run.manifest");
    const std::size_t origin = fm.size_value("origin", 0), members = fm.size_value("members", 0),
                      steps = fm.size_value("steps", 0);
    if (members == 0 || steps == 0) throw io::IoError("forecast manifest lacks members/steps");
    const auto ds = synth::load_dataset(a.truth);
    if (origin + steps >= ds.steps()) throw ConfigError("truth series ends before the forecast does");
    const auto clim = train::NormStats::from_tensor(io::load_msgt<double>(fs::path(a.truth) / "stats.msgt"));
    const LatLonGrid grid = ds.grid();
    const std::size_t C = ds.channels();

    std::ostringstream csv;
    csv << "lead,channel,rmse,nrmse,crps,spread,ssr,drift\n";
    csv << std::setprecision(8);
    const auto initial = ds.frame(origin);
    for (std::size_t s = 1; s <= steps; ++s) {
        std::vector<Tensor<double>> frames;
        for (std::size_t mem = 0; mem < members; ++mem) {
            auto f = io::load_msgt<double>(fs::path(a.forecast) / member_file(mem, s));
            if (f.shape() != Shape{grid.height(), grid.width(), C})
                throw io::IoError(member_file(mem, s) + " has shape " + shape_str(f.shape()));
            frames.push_back(std::move(f));
        }
        const auto truth = ds.frame(origin + s);
        for (std::size_t c = 0; c < C; ++c) {
            diag::EnsembleScore score(grid);
            std::vector<Tensor<double>> mem_fields;
            double drift = 0;
            for (const auto& f : frames) {
                mem_fields.push_back(diag::channel(f, c));
                drift += diag::weighted_mean(mem_fields.back(), grid);
            }
            drift = drift / static_cast<double>(members) - diag::weighted_mean(diag::channel(initial, c), grid);
            score.add(mem_fields, diag::channel(truth, c));
            const auto r = score.result(clim.std[c], members >= 2);
            csv << s << ',' << c << ',' << r.rmse << ',' << r.nrmse << ',' << r.crps << ',' << r.spread << ','
                << r.ssr << ',' << drift << '\n';
        }
    }
    write_text(a.report, csv.str());
    m.add("forecast", a.forecast);
    m.add("truth", a.truth);
    m.write(a.report + ".manifest");
    std::cout << "wrote " << a.report << "\n";
    return kOk;
}

// ---- spectra ----------------------------------------------------------------------------

struct SpectraArgs {
    std::string field, reference, out, ratio_out;
    std::size_t nmax = 48;
    std::size_t channel = 0;
    bool amplitude = false;
};

Tensor<double> load_field(const std::string& path, std::size_t channel) {
    auto t = io::load_msgt<double>(path);
    if (t.rank() == 2) return t;
    if (t.rank() == 3) return diag::channel(t, channel);
    throw DimensionError(path + " holds " + shape_str(t.shape()) + "; expected [H, W] or [H, W, C]");
}

int cmd_spectra(const CLI::App& cmd, const SpectraArgs& a) {
    Manifest m(cmd, 0);
    const auto f = load_field(a.field, a.channel);
    const auto p = spectral::spherical_power_spectrum(f, a.nmax);
    std::ostringstream os;
    os << "# degree power\n" << std::setprecision(10);
    for (std::size_t n = 0; n < p.size(); ++n) os << n << ' ' << p[n] << '\n';
    write_text(a.out, os.str());
    if (!a.reference.empty()) {
        if (a.ratio_out.empty()) throw ConfigError("--reference needs --ratio-out");
        const auto r = spectral::spectral_ratio({f}, {load_field(a.reference, a.channel)}, a.nmax, a.amplitude);
        std::ostringstream rs;
        rs << "# degree ratio\n" << std::setprecision(10);
        for (std::size_t n = 0; n < r.size(); ++n) {
            rs << n << ' ';
            if (r[n])
                rs << *r[n];
            else
                rs << "nan";
            rs << '\n';
        }
        write_text(a.ratio_out, rs.str());
        m.add("effective_resolution", std::to_string(spectral::effective_resolution(r)));
    }
    m.add("field", a.field);
    m.write(a.out + ".manifest");
    return kOk;
}

// ---- alias-demo -------------------------------------------------------------------------

struct AliasArgs {
    std::size_t native = 16;
    std::vector<std::size_t> coarse{2, 4, 8};
    std::size_t signals = 8;
    std::size_t band = 24;
    double slope = 0.0;
    std::string nonlinearity = "square";
    std::string source = "96x192";
    std::string out;
    std::uint64_t seed = 1;
};

int cmd_alias(const CLI::App& cmd, const AliasArgs& a) {
    Manifest m(cmd, a.seed);
    std::function<double(double)> g;
    if (a.nonlinearity == "square")
        g = [](double x) { return x * x; };
    else if (a.nonlinearity == "identity")
        g = [](double x) { return x; };
    else if (a.nonlinearity == "tanh")
        g = [](double x) { return std::tanh(x); };
    else
        throw ConfigError("nonlinearity must be square, identity or tanh");
    const auto [h, w] = parse_grid(a.source);
    const LatLonGrid src(h, w);
    const auto signals = diag::red_signals(a.signals, a.band, a.slope, a.seed);
    std::ostringstream os;
    os << std::setprecision(8);
    std::size_t lo = 0, hi = 0;
    std::ostringstream table;
    table << "# coarse_nside degree native_ratio coarse_ratio\n" << std::setprecision(8);
    for (std::size_t i = 0; i < a.coarse.size(); ++i) {
        const auto r = diag::aliasing_demo(signals, src, a.native, a.coarse[i], g);
        if (i == 0) {
            lo = r.band_lo;
            hi = r.band_hi;
        }
        for (std::size_t n = 0; n < r.coarse_ratio.size(); ++n) {
            table << a.coarse[i] << ' ' << n << ' ';
            table << (r.native_ratio[n] ? std::to_string(*r.native_ratio[n]) : "nan") << ' ';
            table << (r.coarse_ratio[n] ? std::to_string(*r.coarse_ratio[n]) : "nan") << '\n';
        }
        const double e = r.excess(lo, hi), own = r.excess();
        std::cout << "coarse nside " << a.coarse[i] << ": excess over native " << std::fixed << std::setprecision(3) << e
                  << " on degrees " << lo << "-" << hi << ", " << own << " on its own upper band " << r.band_lo << "-"
                  << r.band_hi << std::endl;
        m.add("excess_nside_" + std::to_string(a.coarse[i]), e);
    }
    if (!a.out.empty()) {
        write_text(a.out, table.str());
        m.write(a.out + ".manifest");
    }
    return kOk;
}

// ---- bench --------------------------------------------------------------------------------

struct BenchArgs {
    bench::BenchConfig cfg;
    bool no_dense = false;
    std::string out;
};

int cmd_bench(const CLI::App& cmd, BenchArgs a) {
    a.cfg.dense = !a.no_dense;
    Manifest m(cmd, a.cfg.seed);
    const auto rows = bench::run(a.cfg);
    std::ostringstream os;
    bench::write_csv(os, rows);
    std::cout << os.str();
    if (a.cfg.lengths.size() >= 2) {
        std::cout << "bsa slope " << bench::variant_slope(rows, "bsa") << "\n";
        if (a.cfg.dense) std::cout << "dense slope " << bench::variant_slope(rows, "dense") << "\n";
    }
    if (!a.out.empty()) {
        write_text(a.out, os.str());
        m.write(a.out + ".manifest");
    }
    return kOk;
}

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const CLI::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const io::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}

// Values from a `--config` file for options not given on the command line.
// Keys are long option names without dashes, bare or under a [subcommand]
// section.
void apply_config(CLI::App& sub, const std::string& path) {
    if (path.empty()) return;
    if (!fs::exists(path)) throw io::IoError("config file " + path + " not found");
    const auto items = CLI::ConfigTOML().from_file(path);
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;  // section markers
        if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub.get_name()))
            throw ConfigError("config section '" + item.parents[0] + "' does not belong to " + sub.get_name());
        CLI::Option* opt = nullptr;
        try {
            opt = sub.get_option("--" + item.name);
        } catch (const CLI::OptionNotFound&) {
            throw ConfigError("unknown config key '" + item.name + "' for " + sub.get_name());
        }
        if (opt->count() > 0 || item.name == "config") continue;
        for (const auto& v : item.inputs) opt->add_result(v);
        opt->run_callback();
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HEALPix U-Net ensemble forecaster with block-sparse attention (desk scale)", "mosaic"};
    app.set_version_flag("--version", kVersion);
    app.set_help_all_flag("--help-all", "Print help for every subcommand");
    app.require_subcommand(1);
    app.footer("Exit codes: 0 ok, 1 internal error, 2 config error, 3 numeric failure, 4 I/O error.\n"
               "SPHERE_BSA_THREADS caps worker threads.");
    int rc = kOk;

    std::map<const CLI::App*, std::string> configs;
    auto with_config = [&](CLI::App* sub) {
        sub->add_option("--config", configs[sub], "key = value file; command-line flags win");
    };
    auto on_run = [&](CLI::App* sub, std::function<int()> fn) {
        sub->callback([&rc, &configs, sub, fn] {
            rc = guarded([&] {
                apply_config(*sub, configs[sub]);
                return fn();
            });
        });
    };

    // mesh
    MeshArgs mesh;
    auto* mesh_cmd = app.add_subcommand("mesh", "Inspect a HEALPix mesh");
    auto* mesh_info = mesh_cmd->add_subcommand("info", "Pixel count and resolution");
    mesh_cmd->require_subcommand(1);
    mesh_info->add_option("--nside", mesh.nside, "HEALPix nside (power of two)")->capture_default_str();
    mesh_info->add_option("--block", mesh.block, "Also report blocks of this many pixels")->capture_default_str();
    on_run(mesh_info, [&] { return cmd_mesh(mesh); });

    // synth
    SynthArgs syn;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset of MSGT states");
    with_config(synth_cmd);
    synth_cmd->add_option("--out", syn.out, "Output directory")->required();
    synth_cmd->add_option("--grid", syn.grid, "Grid as HxW")->capture_default_str();
    synth_cmd->add_option("--channels", syn.cfg.channels, "Dynamic channels")->capture_default_str();
    synth_cmd->add_option("--steps", syn.cfg.steps, "Number of states")->capture_default_str();
    synth_cmd->add_option("--band-limit", syn.cfg.band_limit, "Largest spherical-harmonic degree")->capture_default_str();
    synth_cmd->add_option("--ar", syn.cfg.ar, "AR(1) coefficient of the harmonic coefficients")->capture_default_str();
    synth_cmd->add_option("--rotation", syn.cfg.rotation_deg, "Eastward rotation per step, degrees")->capture_default_str();
    synth_cmd->add_option("--slope", syn.cfg.spectral_slope, "Coefficient std falls as degree^-slope")->capture_default_str();
    synth_cmd->add_option("--day-period", syn.cfg.day_period, "Steps per simulated day")->capture_default_str();
    synth_cmd->add_option("--year-period", syn.cfg.year_period, "Steps per simulated year")->capture_default_str();
    synth_cmd->add_option("--seed", syn.cfg.seed, "Random seed")->capture_default_str();
    on_run(synth_cmd, [&] { return cmd_synth(*synth_cmd, syn); });

    // train and finetune share flags
    TrainArgs tr, ft;
    ft.cfg.rollout = 4;
    ft.cfg.steps = 200;
    ft.cfg.lr_max = 1e-4;
    auto train_flags = [&](CLI::App* sub, TrainArgs& a, bool finetune) {
        with_config(sub);
        sub->add_option("--data", a.data, "Dataset directory")->required();
        sub->add_option("--out", a.out, "Checkpoint directory")->required();
        if (finetune) {
            sub->add_option("--init", a.init, "Checkpoint to start from")->required();
        } else {
            sub->add_option("--model", a.model, "toy, desk, or a model.cfg file")->capture_default_str();
            sub->add_option("--stages", a.stages, "Override stages: nside:d:heads:enc:dec:local:sparse:top_n,...");
        }
        sub->add_option("--steps", a.cfg.steps, "Optimiser steps")->capture_default_str();
        sub->add_option("--lr", a.cfg.lr_max, "Peak learning rate")->capture_default_str();
        sub->add_option("--lr-min", a.cfg.lr_min, "Final learning rate")->capture_default_str();
        sub->add_option("--warmup", a.cfg.warmup, "Linear warmup steps")->capture_default_str();
        sub->add_option("--ensemble", a.cfg.ensemble, "Members per training sample")->capture_default_str();
        sub->add_option("--batch", a.cfg.batch, "Samples per step")->capture_default_str();
        sub->add_option("--rollout", a.cfg.rollout, "Autoregressive steps; only the last is differentiated")
            ->capture_default_str();
        sub->add_option("--clip", a.cfg.clip, "Global gradient-norm clip")->capture_default_str();
        sub->add_option("--train-fraction", a.cfg.train_fraction, "Leading fraction of states used for training")
            ->capture_default_str();
        sub->add_option("--weight-decay", a.cfg.muon.weight_decay, "Decoupled weight decay")->capture_default_str();
        sub->add_option("--momentum", a.cfg.muon.beta, "Muon momentum")->capture_default_str();
        sub->add_option("--ns-steps", a.cfg.muon.ns_steps, "Orthogonalisation iterations")->capture_default_str();
        sub->add_option("--orthogonalizer", a.orthogonalizer, "newton or quintic")->capture_default_str();
        sub->add_option("--alpha", a.alpha, "Per-channel loss weights, comma separated (default all 1)");
        sub->add_option("--val-windows", a.val_windows, "Validation windows")->capture_default_str();
        sub->add_option("--val-members", a.val_members, "Validation ensemble size")->capture_default_str();
        sub->add_option("--log-every", a.log_every, "Print every n steps (0: quiet)")->capture_default_str();
        sub->add_option("--seed", a.cfg.seed, "Random seed")->capture_default_str();
    };
    auto* train_cmd = app.add_subcommand("train", "Train a model with the fair-CRPS objective");
    train_flags(train_cmd, tr, false);
    on_run(train_cmd, [&] { return cmd_train(*train_cmd, tr, false); });
    auto* ft_cmd = app.add_subcommand("finetune", "Continue training a checkpoint at a longer rollout");
    train_flags(ft_cmd, ft, true);
    on_run(ft_cmd, [&] { return cmd_train(*ft_cmd, ft, true); });

    // forecast
    ForecastArgs fc;
    auto* fc_cmd = app.add_subcommand("forecast", "Roll out an ensemble from a dataset state");
    with_config(fc_cmd);
    fc_cmd->add_option("--ckpt", fc.ckpt, "Checkpoint directory")->required();
    fc_cmd->add_option("--data", fc.data, "Dataset directory")->required();
    fc_cmd->add_option("--out", fc.out, "Output directory")->required();
    fc_cmd->add_option("--members", fc.members, "Ensemble members")->capture_default_str();
    fc_cmd->add_option("--steps", fc.steps, "Forecast steps")->capture_default_str();
    fc_cmd->add_option("--origin", fc.origin, "Index of the last observed state (default: start of validation)");
    fc_cmd->add_option("--seed", fc.seed, "Noise seed")->capture_default_str();
    on_run(fc_cmd, [&] { return cmd_forecast(*fc_cmd, fc); });

    // eval
    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "Score a forecast against the truth series");
    with_config(ev_cmd);
    ev_cmd->add_option("--forecast", ev.forecast, "Forecast directory")->required();
    ev_cmd->add_option("--truth", ev.truth, "Dataset directory")->required();
    ev_cmd->add_option("--report", ev.report, "Output CSV")->required();
    on_run(ev_cmd, [&] { return cmd_eval(*ev_cmd, ev); });

    // spectra
    SpectraArgs sp;
    auto* sp_cmd = app.add_subcommand("spectra", "Spherical power spectrum of a field");
    with_config(sp_cmd);
    sp_cmd->add_option("--field", sp.field, "MSGT file, [H, W] or [H, W, C]")->required();
    sp_cmd->add_option("--channel", sp.channel, "Channel of a [H, W, C] field")->capture_default_str();
    sp_cmd->add_option("--nmax", sp.nmax, "Largest degree")->capture_default_str();
    sp_cmd->add_option("--out", sp.out, "Output .dat (degree power)")->required();
    sp_cmd->add_option("--reference", sp.reference, "Reference field for a spectral ratio");
    sp_cmd->add_option("--ratio-out", sp.ratio_out, "Output .dat (degree ratio)");
    sp_cmd->add_flag("--amplitude", sp.amplitude, "Report amplitude instead of power ratio");
    on_run(sp_cmd, [&] { return cmd_spectra(*sp_cmd, sp); });

    // alias-demo
    AliasArgs al;
    auto* al_cmd = app.add_subcommand("alias-demo", "Nonlinearity on a native vs a coarse mesh");
    with_config(al_cmd);
    al_cmd->add_option("--native", al.native, "Native mesh nside")->capture_default_str();
    al_cmd->add_option("--coarse", al.coarse, "Coarse mesh nsides")->delimiter(',')->capture_default_str();
    al_cmd->add_option("--signals", al.signals, "Random test signals averaged")->capture_default_str();
    al_cmd->add_option("--band", al.band, "Largest degree of the test signals")->capture_default_str();
    al_cmd->add_option("--slope", al.slope, "Coefficient std falls as degree^-slope")->capture_default_str();
    al_cmd->add_option("--nonlinearity", al.nonlinearity, "square, identity or tanh")->capture_default_str();
    al_cmd->add_option("--source", al.source, "Source lat-lon grid as HxW")->capture_default_str();
    al_cmd->add_option("--out", al.out, "Output .dat of per-degree ratios");
    al_cmd->add_option("--seed", al.seed, "Signal seed")->capture_default_str();
    on_run(al_cmd, [&] { return cmd_alias(*al_cmd, al); });

    // bench
    BenchArgs be;
    auto* be_cmd = app.add_subcommand("bench", "Time the attention core, block-sparse vs dense");
    with_config(be_cmd);
    be_cmd->add_option("--lengths", be.cfg.lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
    be_cmd->add_option("--block", be.cfg.sparse_block, "Compression/selection block size")->capture_default_str();
    be_cmd->add_option("--local", be.cfg.local_block, "Local block size")->capture_default_str();
    be_cmd->add_option("--top-n", be.cfg.top_n, "Selected blocks per query block")->capture_default_str();
    be_cmd->add_option("--head-dim", be.cfg.head_dim, "Head width")->capture_default_str();
    be_cmd->add_option("--heads", be.cfg.heads, "Heads")->capture_default_str();
    be_cmd->add_option("--repeats", be.cfg.repeats, "Timed repeats (median reported)")->capture_default_str();
    be_cmd->add_flag("--no-dense", be.no_dense, "Skip the dense baseline");
    be_cmd->add_option("--out", be.out, "Output CSV (length,variant,ms,macs)");
    be_cmd->add_option("--seed", be.cfg.seed, "Random seed")->capture_default_str();
    on_run(be_cmd, [&] { return cmd_bench(*be_cmd, be); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }
    return rc;
}
