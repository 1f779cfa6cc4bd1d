// Command-line front end: phantom generation, both training phases,
// inference, fusion, evaluation, cross-validation and overlays.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "l2s/config.hpp"
#include "l2s/experiment.hpp"
#include "l2s/metrics.hpp"
#include "l2s/model.hpp"
#include "l2s/phantom.hpp"
#include "l2s/pipeline.hpp"

namespace fs = std::filesystem;
using namespace l2s;

namespace {

bool g_quiet = false;

void note(const std::string& s) {
    if (!g_quiet) std::cerr << s << '\n';
}

// Removes what a failed subcommand wrote: directories it created and files it
// started inside directories that already existed.
class Outputs {
public:
    ~Outputs() {
        if (committed_) return;
        std::error_code ec;
        for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
        for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) fs::remove_all(*it, ec);
    }

    void dir(const fs::path& d) {
        if (!fs::exists(d)) {
            fs::create_directories(d);
            dirs_.push_back(d);
        } else if (!fs::is_directory(d)) {
            throw IoError(d.string() + " exists and is not a directory");
        }
    }

    fs::path file(const fs::path& f) {
        if (f.has_parent_path()) dir(f.parent_path());
        files_.push_back(f);
        return f;
    }

    void commit() { committed_ = true; }

private:
    std::vector<fs::path> dirs_, files_;
    bool committed_ = false;
};

RunConfig load_config(const std::string& path) { return path.empty() ? config::parse("") : config::load(path); }

fs::path need_dir(const std::string& flag, std::string value, const std::string& fallback = {}) {
    if (value.empty()) value = fallback;
    if (value.empty()) throw ConfigError(flag + " is required");
    return value;
}

std::vector<Case> read_cases(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("no dataset directory " + dir.string());
    return read_dataset(dir);
}

Volume read_volume(const fs::path& p, Modality m, const std::string& what) {
    if (!fs::exists(p)) throw MissingInput(what + ": missing " + p.string());
    Volume v = read_nifti(p);
    v.modality = m;
    return v;
}

void echo_config(Outputs& out, const RunConfig& cfg, const fs::path& path) {
    write_text_file(out.file(path), config::echo(cfg));
}

EpochCallback progress(const std::string& tag) {
    return [tag](const EpochRecord& r) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s epoch %d lr %.6g loss %.6g", tag.c_str(), r.epoch, r.lr, r.loss);
        note(buf);
    };
}

struct Args {
    std::string config, data, out, ckpt, cues, pred, masks, id, method;
    bool unweighted = false;
};

// ---------------------------------------------------------------------------

void cmd_generate(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const fs::path dir = need_dir("--out", a.out, cfg.paths.data);
    Outputs out;
    out.dir(dir);
    std::vector<ManifestRow> rows;
    const auto cases = generate_dataset(cfg.phantom, static_cast<std::size_t>(cfg.cases), cfg.phantom.seed, &rows);
    for (const Case& c : cases) {
        out.file(case_file(dir, c.id, "ct"));
        out.file(case_file(dir, c.id, "pet"));
        if (c.label) out.file(case_file(dir, c.id, "label"));
        write_case(c, dir);
    }
    write_manifest(rows, out.file(dir / "manifest.tsv"));
    echo_config(out, cfg, dir / "config.effective.toml");
    note("wrote " + std::to_string(cases.size()) + " cases to " + dir.string());
    out.commit();
}

void cmd_train_phase1(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const auto cases = read_cases(need_dir("--data", a.data, cfg.paths.data));
    Outputs out;
    const fs::path ckpt = a.out;
    TrainResult r = train_phase1(cases, cfg.phase1, cfg.preprocess, progress("phase1"));
    save_checkpoint(r.model, out.file(ckpt));
    write_text_file(out.file(ckpt.string() + ".log"), history_text(r.history));
    echo_config(out, cfg, ckpt.string() + ".config.toml");
    out.commit();
}

void cmd_infer_cue(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    Model<float> m = load_checkpoint<float>(a.ckpt);
    const auto cases = read_cases(need_dir("--data", a.data, cfg.paths.data));
    const fs::path dir = a.out;
    Outputs out;
    out.dir(dir);
    for (const Case& c : cases) {
        const LocationCue cue = infer_cue(m, c, cfg.preprocess, cfg.inference.slice_batch);
        write_nifti(cue.cue, out.file(case_file(dir, c.id, "cue")));
        note("cue " + c.id);
    }
    echo_config(out, cfg, dir / "config.effective.toml");
    out.commit();
}

void cmd_train_phase2(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const auto cases = read_cases(need_dir("--data", a.data, cfg.paths.data));
    std::vector<LocationCue> cues;
    for (const Case& c : cases) cues.push_back({read_volume(case_file(a.cues, c.id, "cue"), Modality::PROB, "cue of case " + c.id)});
    Phase2Config p2 = cfg.phase2;
    p2.weighted = !a.unweighted;
    Outputs out;
    const fs::path ckpt = a.out;
    TrainResult r = train_phase2(cases, cues, p2, cfg.preprocess, progress("phase2"));
    save_checkpoint(r.model, out.file(ckpt));
    write_text_file(out.file(ckpt.string() + ".log"), history_text(r.history));
    echo_config(out, cfg, ckpt.string() + ".config.toml");
    out.commit();
}

void cmd_infer(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    Model<float> m = load_checkpoint<float>(a.ckpt);
    const auto cases = read_cases(need_dir("--data", a.data, cfg.paths.data));
    const fs::path dir = a.out;
    Outputs out;
    out.dir(dir);
    for (const Case& c : cases) {
        const Volume p = infer_3d(m, c, cfg.phase2.patch, cfg.inference, cfg.preprocess);
        write_nifti(p, out.file(case_file(dir, c.id, "pred")));
        note("pred " + c.id);
    }
    echo_config(out, cfg, dir / "config.effective.toml");
    out.commit();
}

std::vector<std::string> ids_with_suffix(const fs::path& dir, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw IoError("no directory " + dir.string());
    const std::string tail = "_" + suffix + ".nii";
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > tail.size() && name.compare(name.size() - tail.size(), tail.size(), tail) == 0) {
            ids.push_back(name.substr(0, name.size() - tail.size()));
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

void cmd_fuse(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const auto ids = ids_with_suffix(a.pred, "pred");
    if (ids.empty()) throw MissingInput("fuse: no *_pred.nii files in " + a.pred);
    const fs::path dir = a.out;
    Outputs out;
    out.dir(dir);
    for (const auto& id : ids) {
        const Volume pred = read_volume(case_file(a.pred, id, "pred"), Modality::PROB, "prediction of case " + id);
        const LocationCue cue{read_volume(case_file(a.cues, id, "cue"), Modality::PROB, "cue of case " + id)};
        write_nifti(fuse(pred, cue, cfg.fusion), out.file(case_file(dir, id, "mask")));
    }
    echo_config(out, cfg, dir / "config.effective.toml");
    out.commit();
}

void cmd_evaluate(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const auto cases = read_cases(need_dir("--data", a.data, cfg.paths.data));
    std::map<std::string, Volume> masks;
    for (const Case& c : cases) {
        const fs::path p = case_file(a.masks, c.id, "mask");
        if (!fs::exists(p)) throw MissingInput("evaluate: no mask for case " + c.id + " (" + p.string() + ")");
        masks.emplace(c.id, read_volume(p, Modality::MASK, "mask of case " + c.id));
    }
    fs::path mask_dir = fs::path(a.masks).lexically_normal();
    if (!mask_dir.has_filename()) mask_dir = mask_dir.parent_path();
    const std::string method = a.method.empty() ? mask_dir.filename().string() : a.method;
    const MetricsReport r = evaluate(cases, masks, cfg.metrics.connectivity, method);
    Outputs out;
    const fs::path tsv = a.out;
    write_text_file(out.file(tsv), report_tsv(r));
    nlohmann::ordered_json j;
    j["method"] = r.method;
    j["connectivity"] = r.connectivity;
    j["mDice"] = r.mean_dice;
    j["FPV"] = r.mean_fpv_ml;
    j["FNV"] = r.mean_fnv_ml;
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& c : r.per_case) j["cases"].push_back({{"id", c.id}, {"dice", c.dice}, {"fpv_ml", c.fpv_ml}, {"fnv_ml", c.fnv_ml}});
    fs::path json = tsv;
    json.replace_extension(".json");
    write_text_file(out.file(json), j.dump(2) + "\n");
    std::cout << "mDice " << detail::fixed6(r.mean_dice) << " FPV " << detail::fixed6(r.mean_fpv_ml) << " FNV "
              << detail::fixed6(r.mean_fnv_ml) << '\n';
    out.commit();
}

void cmd_crossval(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    std::vector<Case> cases;
    const std::string data = a.data.empty() ? cfg.paths.data : a.data;
    if (data.empty()) {
        note("generating " + std::to_string(cfg.cases) + " phantoms in memory");
        cases = generate_dataset(cfg.phantom, static_cast<std::size_t>(cfg.cases), cfg.phantom.seed);
    } else {
        cases = read_cases(data);
    }
    const fs::path dir = need_dir("--out", a.out, cfg.paths.out);
    Outputs out;
    out.dir(dir);
    for (int k = 0; k < cfg.metrics.folds; ++k) out.dir(dir / ("fold_" + std::to_string(k)));
    out.file(dir / "summary.tsv");
    out.file(dir / "summary.json");
    echo_config(out, cfg, dir / "config.effective.toml");
    const CrossvalResult res = crossval(cases, cfg, dir, note);
    std::cout << summary_tsv(res.summary);
    out.commit();
}

void cmd_overlay(const Args& a) {
    const RunConfig cfg = load_config(a.config);
    const fs::path data = need_dir("--data", a.data, cfg.paths.data);
    const Volume pet = read_volume(case_file(data, a.id, "pet"), Modality::PET, "PET of case " + a.id);
    const Volume mask = read_volume(case_file(a.masks, a.id, "mask"), Modality::MASK, "mask of case " + a.id);
    require_aligned(mask, pet, "overlay: mask");
    const Volume img = window_pet(pet, cfg.preprocess);
    const std::size_t i = pet.shape[0] / 2, H = pet.shape[1], W = pet.shape[2];
    auto inside = [&](long j, long k) {
        return j >= 0 && k >= 0 && j < static_cast<long>(H) && k < static_cast<long>(W) && mask.at(i, j, k) > 0.5f;
    };
    std::string ppm = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (long j = 0; j < static_cast<long>(H); ++j)
        for (long k = 0; k < static_cast<long>(W); ++k) {
            const bool edge = inside(j, k) && !(inside(j - 1, k) && inside(j + 1, k) && inside(j, k - 1) && inside(j, k + 1));
            const auto g = static_cast<unsigned char>(std::lround(255.0f * img.at(i, j, k)));
            ppm += edge ? std::string{'\xff', '\0', '\0'} : std::string(3, static_cast<char>(g));
        }
    Outputs out;
    write_text_file(out.file(a.out), ppm);
    out.commit();
}

}  // namespace

int main(int argc, char** argv) {
    configure_threads_from_env();
    CLI::App app{"Two-phase PET/CT lesion segmentation on synthetic phantoms"};
    app.require_subcommand(1);
    app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");
    Args a;

    auto add = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };
    auto opt_config = [&](CLI::App* s, bool required) {
        auto* o = s->add_option("--config", a.config, "Run configuration (TOML subset)")->check(CLI::ExistingFile);
        if (required) o->required();
    };

    auto* gen = add("generate", "Write a phantom dataset and manifest");
    opt_config(gen, true);
    gen->add_option("--out", a.out, "Dataset directory");
    gen->callback([&] { cmd_generate(a); });

    auto* t1 = add("train-phase1", "Train the 2D localization net");
    opt_config(t1, true);
    t1->add_option("--data", a.data, "Dataset directory");
    t1->add_option("--out", a.out, "Checkpoint path")->required();
    t1->callback([&] { cmd_train_phase1(a); });

    auto* ic = add("infer-cue", "Write location cues for every case");
    opt_config(ic, false);
    ic->add_option("--ckpt", a.ckpt, "Phase-1 checkpoint")->required()->check(CLI::ExistingFile);
    ic->add_option("--data", a.data, "Dataset directory");
    ic->add_option("--out", a.out, "Cue directory")->required();
    ic->callback([&] { cmd_infer_cue(a); });

    auto* t2 = add("train-phase2", "Train the 3D segmentation net");
    opt_config(t2, true);
    t2->add_option("--data", a.data, "Dataset directory");
    t2->add_option("--cues", a.cues, "Cue directory")->required();
    t2->add_option("--out", a.out, "Checkpoint path")->required();
    t2->add_flag("--unweighted", a.unweighted, "Train without cue weighting (3D-only baseline)");
    t2->callback([&] { cmd_train_phase2(a); });

    auto* inf = add("infer", "Sliding-window 3D probability maps");
    opt_config(inf, false);
    inf->add_option("--ckpt", a.ckpt, "Phase-2 checkpoint")->required()->check(CLI::ExistingFile);
    inf->add_option("--data", a.data, "Dataset directory");
    inf->add_option("--out", a.out, "Prediction directory")->required();
    inf->callback([&] { cmd_infer(a); });

    auto* fu = add("fuse", "Cue-gated thresholding of predictions");
    opt_config(fu, true);
    fu->add_option("--pred", a.pred, "Prediction directory")->required();
    fu->add_option("--cues", a.cues, "Cue directory")->required();
    fu->add_option("--out", a.out, "Mask directory")->required();
    fu->callback([&] { cmd_fuse(a); });

    auto* ev = add("evaluate", "Dice, FPV and FNV of masks against labels");
    opt_config(ev, false);
    ev->add_option("--data", a.data, "Dataset directory");
    ev->add_option("--masks", a.masks, "Mask directory")->required();
    ev->add_option("--out", a.out, "Report path (.tsv; a .json twin is written beside it)")->required();
    ev->add_option("--method", a.method, "Method name recorded in the report");
    ev->callback([&] { cmd_evaluate(a); });

    auto* cv = add("crossval", "k-fold cross-validation of all four methods");
    opt_config(cv, true);
    cv->add_option("--data", a.data, "Dataset directory (default: generate from [phantom])");
    cv->add_option("--out", a.out, "Output directory");
    cv->callback([&] { cmd_crossval(a); });

    auto* ov = add("overlay", "Mid-slice PET with mask contour as PPM");
    opt_config(ov, false);
    ov->add_option("--case", a.id, "Case id")->required();
    ov->add_option("--data", a.data, "Dataset directory");
    ov->add_option("--masks", a.masks, "Mask directory")->required();
    ov->add_option("--out", a.out, "Output .ppm")->required();
    ov->callback([&] { cmd_overlay(a); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: usage_error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal_error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
