// codequant command-line driver.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "codequant/error.hpp"
#include "codequant/lutgemm.hpp"
#include "codequant/parallel.hpp"
#include "codequant/pipeline.hpp"

namespace fs = std::filesystem;
using namespace codequant;

namespace {

enum Exit { ok = 0, config = 2, numeric = 3, io = 4 };

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "key = value config file");
    app->add_option("--seed", c.seed, "overrides the config seed");
    app->add_option("--threads", c.threads, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

PipelineConfig resolve(const Common& c) {
    PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_pipeline_config(c.config_path);
    if (c.seed) cfg.model.seed = *c.seed;
    cfg.validate();
    set_num_threads(c.threads);
    return cfg;
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + p.string() + "' for writing");
    f << bytes;
    if (!f) throw FormatError("failed writing '" + p.string() + "'");
}

std::vector<BenchShape> parse_shapes(const std::string& spec) {
    // "N,d_in,d_out,g;N,d_in,d_out,g;..."
    std::vector<BenchShape> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ';')) {
        BenchShape s;
        char c1 = 0, c2 = 0, c3 = 0;
        std::istringstream is(item);
        if (!(is >> s.n >> c1 >> s.d_in >> c2 >> s.d_out >> c3 >> s.group) || c1 != ',' || c2 != ',' || c3 != ',')
            throw ConfigError("bad shape '" + item + "', expected N,d_in,d_out,g");
        out.push_back(s);
    }
    if (out.empty()) throw ConfigError("no benchmark shapes given");
    return out;
}

std::string eval_text(const std::vector<SplitEval>& evals) {
    EvalReport r;
    r.evals = evals;
    const std::string full = r.to_text();
    return full.substr(full.find("[eval]"));
}

int run(int argc, char** argv) {
    CLI::App app{"CodeQuant desk-scale toolkit"};
    app.require_subcommand(1);

    Common gen_c, pipe_c, eval_c;
    std::string gen_out = "model.cqm", pipe_out, eval_model, eval_out;
    auto* gen = app.add_subcommand("generate", "write the synthetic full-precision model");
    add_common(gen, gen_c);
    gen->add_option("--out", gen_out, "container path");

    auto* pipe = app.add_subcommand("pipeline", "compress, evaluate and write report.txt + model.cqm");
    add_common(pipe, pipe_c);
    pipe->add_option("--out", pipe_out, "output directory");

    auto* ev = app.add_subcommand("eval", "evaluate a compressed container against the config's model");
    add_common(ev, eval_c);
    ev->add_option("--model", eval_model, "compressed container")->required();
    ev->add_option("--out", eval_out, "report path (default: stdout)");

    std::size_t repeats = 5;
    int bench_threads = 1;
    std::string shapes = "256,256,256,16;256,1024,1024,64;512,512,512,16;1024,256,1024,0;16,1024,1024,64", bench_out;
    auto* bench = app.add_subcommand("bench-gemm", "time lut, reference and fp32 GEMM");
    bench->add_option("--shapes", shapes, "N,d_in,d_out,g separated by ';' (g = 0: whole row)");
    bench->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
    bench->add_option("--threads", bench_threads)->check(CLI::PositiveNumber);
    bench->add_option("--out", bench_out, "report path (default: stdout)");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "print a container manifest");
    inspect->add_option("path", inspect_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config;
    }

    if (*gen) {
        const PipelineConfig cfg = resolve(gen_c);
        save_model(generate_synthetic_model(cfg.model, cfg.synthetic), gen_out);
        std::cout << "wrote " << gen_out << "\n";
    } else if (*pipe) {
        const PipelineConfig cfg = resolve(pipe_c);
        const PipelineResult r = run_pipeline(cfg);
        const std::string report = r.report.to_text();
        if (pipe_out.empty()) {
            std::cout << report;
        } else {
            std::error_code ec;
            fs::create_directories(pipe_out, ec);
            if (ec) throw FormatError("cannot create '" + pipe_out + "': " + ec.message());
            write_file(fs::path(pipe_out) / "report.txt", report);
            write_file(fs::path(pipe_out) / "model.cqm", serialize_model(r.model));
            std::printf("final_error = %.6g\nmean_router_change = %.6g\n", r.report.final_error(),
                        r.report.mean_router_change());
        }
    } else if (*ev) {
        const PipelineConfig cfg = resolve(eval_c);
        const ModelWeights original = generate_synthetic_model(cfg.model, cfg.synthetic);
        const ModelWeights compressed = load_model(eval_model);
        if (!(compressed.config == cfg.model)) throw ConfigError("container model does not match the config's model");
        std::vector<SplitEval> evals;
        for (auto split : cfg.eval_splits) {
            SplitEval e = evaluate(original, compressed, generate_calibration(cfg.model, cfg.eval_tokens, split), cfg.abits);
            e.split = split;
            evals.push_back(std::move(e));
        }
        const std::string text = eval_text(evals);
        if (eval_out.empty()) std::cout << text;
        else write_file(eval_out, text);
    } else if (*bench) {
        set_num_threads(bench_threads);
        const std::string text = bench_report(bench_gemm(parse_shapes(shapes), repeats));
        if (bench_out.empty()) std::cout << text;
        else write_file(bench_out, text);
    } else if (*inspect) {
        std::ifstream f(inspect_path, std::ios::binary);
        if (!f) throw FormatError("cannot open '" + inspect_path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        const ContainerManifest m = read_manifest(ss.str());
        std::cout << "version = " << m.version << "\n[config]\n" << m.config_text << "\n[tensors]\nname,dtype,dims,bytes\n";
        for (const auto& t : m.tensors) {
            std::string dims;
            for (auto d : t.dims) dims += (dims.empty() ? "" : "x") + std::to_string(d);
            std::cout << t.name << "," << int(t.dtype) << "," << dims << "," << t.payload_bytes << "\n";
        }
    }
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config;
    } catch (const StageError& e) {
        std::cerr << "stage error: " << e.what() << "\n";
        return config;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return numeric;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return io;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
