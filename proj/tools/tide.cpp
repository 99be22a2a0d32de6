// Command-line surface for corpus generation, training, diagnostics and
// MemoryBlock compression. Every command resolves its configuration, writes
// it next to the outputs, and emits deterministic CSV reports.

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "tide/checkpoint.hpp"
#include "tide/compressor.hpp"
#include "tide/config.hpp"
#include "tide/corpus.hpp"
#include "tide/diagnostics.hpp"
#include "tide/memory.hpp"
#include "tide/model.hpp"
#include "tide/trainer.hpp"

namespace fs = std::filesystem;
using namespace tide;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

struct Cli {
    std::string config_path;
    std::string out_dir = "out";
    int64_t seed = -1;
    int jobs = 1;

    ExperimentConfig load() const {
        ExperimentConfig cfg;
        if (!config_path.empty()) cfg.apply_file(config_path);
        if (seed >= 0) {
            cfg.set("corpus.seed", std::to_string(seed));
            cfg.set("train.seed", std::to_string(seed));
            cfg.set("diag.seed", std::to_string(seed));
        }
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "resolved.cfg", cfg.resolved_text());
        return cfg;
    }

    fs::path out(const std::string& name) const { return fs::path(out_dir) / name; }
};

std::vector<int32_t> load_corpus(const Cli& cli, const ExperimentConfig& cfg,
                                 const std::string& corpus_path) {
    const std::string path =
        corpus_path.empty() ? cli.out("corpus.tok").string() : corpus_path;
    return ingest_token_stream(path, static_cast<int>(cfg.get_int("corpus.vocab_size")));
}

std::pair<std::vector<int32_t>, std::vector<int32_t>> split_corpus(
    const std::vector<int32_t>& tokens, double val_fraction) {
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t val_len = static_cast<int64_t>(std::floor(val_fraction * n));
    return {std::vector<int32_t>(tokens.begin(), tokens.end() - val_len),
            std::vector<int32_t>(tokens.begin() + (n - val_len), tokens.end())};
}

FrequencyBinTable train_bins(const ExperimentConfig& cfg, const std::vector<int32_t>& train) {
    auto bins = count_frequencies(train, static_cast<int>(cfg.get_int("corpus.vocab_size")));
    build_bins(bins, cfg.corpus_bins());
    return bins;
}

std::string tier_or_empty(int bin, int bin_count) {
    if (bin_count != 10 || bin < 0) return "";
    return tier_name(bin_tier(bin));
}

// ---------------------------------------------------------------------------

int cmd_corpus(const Cli& cli) {
    const ExperimentConfig cfg = cli.load();
    const ZipfSpec spec = cfg.corpus_spec();
    const auto tokens = zipf_sample_corpus(spec);
    if (cfg.get_string("corpus.format") == "text") {
        write_token_stream_text(cli.out("corpus.tok").string(), tokens);
    } else {
        write_token_stream_binary(cli.out("corpus.tok").string(), tokens);
    }
    auto table = count_frequencies(tokens, spec.vocab_size);
    build_bins(table, cfg.corpus_bins());

    std::vector<int64_t> sizes(static_cast<size_t>(table.bin_count), 0);
    std::ostringstream csv;
    csv << "token,count,rank,bin,tier\n";
    for (int32_t v = 0; v < spec.vocab_size; ++v) {
        const int32_t bin = table.bins[static_cast<size_t>(v)];
        if (bin >= 0) ++sizes[static_cast<size_t>(bin)];
        csv << v << "," << table.counts[static_cast<size_t>(v)] << ","
            << table.ranks[static_cast<size_t>(v)] << "," << bin << ","
            << tier_or_empty(bin, table.bin_count) << "\n";
    }
    write_text(cli.out("bins.csv"), csv.str());

    int64_t mn = INT64_MAX, mx = 0;
    for (int64_t s : sizes) {
        mn = std::min(mn, s);
        mx = std::max(mx, s);
    }
    if (mx - mn > 1) {
        std::cerr << "corpus: bin cardinality invariant violated (" << mn << ".." << mx << ")\n";
        return 1;
    }
    std::cout << "corpus: " << tokens.size() << " tokens, " << table.clean_types
              << " observed types, " << table.bin_count << " bins\n";
    return 0;
}

int cmd_train(const Cli& cli, const std::string& arch_flag, int k_flag,
              const std::string& resume, const std::string& corpus_path) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    const TrainConfig tc = cfg.train_config();

    const std::string arch = arch_flag.empty() ? cfg.get_string("train.arch") : arch_flag;
    if (arch != "base" && arch != "tide") throw ParamError("train: arch must be base or tide");
    int k = arch == "base" ? 0 : (k_flag >= 0 ? k_flag : static_cast<int>(cfg.get_int("tide.k")));

    std::optional<TideModel> model;
    if (!resume.empty()) {
        model.emplace(load_checkpoint(resume));
    } else {
        model.emplace(cfg.model_config(), cfg.tide_config(k), tc.seed);
    }
    Trainer trainer(*model, tc, tokens);
    if (!resume.empty()) trainer.restore_state(resume + ".state");

    std::ostringstream csv;
    csv << "step,loss,lr,grad_norm\n";
    try {
        while (trainer.current_step() < tc.steps) {
            const StepMetrics m = trainer.run_step();
            csv << m.step << "," << fmt(m.loss) << "," << fmt(m.lr) << "," << fmt(m.grad_norm)
                << "\n";
            if (tc.checkpoint_every > 0 && (m.step + 1) % tc.checkpoint_every == 0 &&
                m.step + 1 < tc.steps) {
                char name[64];
                std::snprintf(name, sizeof(name), "ckpt_%06" PRId64 ".tideckpt", m.step + 1);
                trainer.save(cli.out(name).string());
            }
        }
    } catch (const NumericError& e) {
        write_text(cli.out("abort_dump.txt"),
                   std::string(e.what()) + "\n--- metrics up to the failing step ---\n" +
                       csv.str());
        write_text(cli.out("metrics.csv"), csv.str());
        std::cerr << "error: " << e.what() << " (dump in "
                  << cli.out("abort_dump.txt").string() << ")\n";
        return 2;
    }
    trainer.save(cli.out("ckpt_final.tideckpt").string());
    write_text(cli.out("metrics.csv"), csv.str());

    // held-out per-bin loss decomposition
    const auto bins = train_bins(cfg, trainer.train_tokens());
    const BinLossReport report = eval_per_bin(*model, trainer.val_tokens(), tc.seq_len, bins);
    std::ostringstream bl;
    bl << "bin,tier,count,mean_ce\n";
    for (int b = 0; b < report.bin_count; ++b) {
        bl << b << "," << tier_or_empty(b, report.bin_count) << ","
           << report.bin_tokens[static_cast<size_t>(b)] << ","
           << fmt(report.bin_mean[static_cast<size_t>(b)]) << "\n";
    }
    bl << "unbinned,," << report.unbinned_tokens << "," << fmt(report.unbinned_mean) << "\n";
    bl << "global,," << report.total_tokens << "," << fmt(report.global_mean) << "\n";
    write_text(cli.out("bin_loss.csv"), bl.str());
    std::cout << "train: " << arch << " k=" << k << " finished at step "
              << trainer.current_step() << "\n";
    return 0;
}

int cmd_audit(const Cli& cli, const std::string& ckpt, const std::string& corpus_path,
              int64_t steps_flag) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    const TrainConfig tc = cfg.train_config();
    Trainer trainer(model, tc, tokens);
    const int64_t steps = steps_flag >= 0 ? steps_flag : cfg.get_int("diag.audit_steps");
    const GradAudit audit = steps > 0 ? run_grad_audit(trainer, steps)
                                      : GradAuditor(model).audit();

    // empirical frequencies of the training region feed the closed form
    const auto [train, val] = split_corpus(tokens, tc.val_fraction);
    std::vector<double> f_hat(static_cast<size_t>(audit.vocab_size), 0.0);
    for (int32_t t : train) f_hat[static_cast<size_t>(t)] += 1.0;
    for (double& x : f_hat) x /= static_cast<double>(train.size());
    const auto checks = occurrence_vs_formula(audit, f_hat, tc.batch, tc.seq_len);

    std::ostringstream csv;
    csv << "token,occurrences,sum_sq_grad,f_hat,expected_occ,sigma,within3\n";
    int violations = 0;
    for (int32_t v = 0; v < audit.vocab_size; ++v) {
        const size_t i = static_cast<size_t>(v);
        csv << v << "," << audit.occurrences[i] << "," << fmt(audit.primary_sq_norm[i]) << ","
            << fmt(f_hat[i]) << "," << fmt(checks[i].expected) << "," << fmt(checks[i].sigma)
            << "," << (checks[i].within_3sigma ? 1 : 0) << "\n";
        if (audit.occurrences[i] == 0 && audit.primary_sq_norm[i] != 0.0) ++violations;
    }
    write_text(cli.out("audit_primary.csv"), csv.str());

    std::ostringstream consts;
    consts << "steps,batch,seq,g2_max,g2_min,within3_fraction,eps_f,c,kappa,ratio_bound\n";
    consts << audit.steps << "," << tc.batch << "," << tc.seq_len << "," << fmt(audit.g2_max)
           << "," << fmt(audit.steps > 0 ? audit.g2_min : 0.0) << ","
           << fmt(fraction_within_3sigma(checks));
    // cumulative-signal ratio bound with the rarest/commonest observed
    // frequencies and the measured gradient constants
    double f_min = 2.0, f_max = 0.0;
    for (double f : f_hat) {
        if (f > 0.0) f_min = std::min(f_min, f);
        f_max = std::max(f_max, f);
    }
    if (audit.steps > 0 && f_max > 0.0 && f_min <= f_max && audit.g2_max > 0.0 &&
        audit.g2_min > 0.0) {
        const auto rb = grad_ratio_bound(f_min, f_max, tc.batch, tc.seq_len, audit.g2_max,
                                         audit.g2_min);
        consts << "," << fmt(f_min) << "," << fmt(f_max) << "," << fmt(rb.kappa) << ","
               << fmt(rb.bound) << "\n";
    } else {
        consts << ",,,,\n";
    }
    write_text(cli.out("audit_constants.csv"), consts.str());

    if (audit.k_blocks > 0) {
        std::ostringstream kc;
        kc << "token,occurrences,cofired,sum_sq_primary,sum_sq_blocks,amplification\n";
        for (int32_t v = 0; v < audit.vocab_size; ++v) {
            const size_t i = static_cast<size_t>(v);
            double blocks = 0.0;
            for (int k = 0; k < audit.k_blocks; ++k) {
                blocks += audit.block_sq_norm[static_cast<size_t>(k)][i];
            }
            const double amp = audit.primary_sq_norm[i] > 0.0
                                   ? blocks / audit.primary_sq_norm[i]
                                   : 0.0;
            kc << v << "," << audit.occurrences[i] << "," << audit.cofired[i] << ","
               << fmt(audit.primary_sq_norm[i]) << "," << fmt(blocks) << "," << fmt(amp) << "\n";
            if (audit.cofired[i] != audit.occurrences[i]) ++violations;
        }
        write_text(cli.out("audit_kpath.csv"), kc.str());
    }
    if (violations > 0) {
        std::cerr << "audit: " << violations << " sparsity/co-firing violations\n";
        return 1;
    }
    std::cout << "audit: " << audit.steps << " steps, within-3sigma fraction "
              << fmt(fraction_within_3sigma(checks)) << "\n";
    return 0;
}

int cmd_collapse(const Cli& cli, const std::string& ckpt) {
    const ExperimentConfig cfg = cli.load();
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    const auto pairs = cfg.diag_pairs();
    if (pairs.empty()) throw ParamError("collapse: diag.pairs is empty");
    const auto templates = make_templates(static_cast<int>(cfg.get_int("diag.templates")),
                                          static_cast<int>(cfg.get_int("diag.template_len")),
                                          model.config().vocab_size,
                                          static_cast<uint64_t>(cfg.get_int("diag.seed")));
    const CollapseReport report =
        collapse_scan(model, templates, pairs, cfg.get_double("diag.delta_tol"));

    std::ostringstream layers, ffn, memory;
    layers << "pair_u,pair_v,layer,mean_dist,collapsed\n";
    ffn << "pair_u,pair_v,layer,ffn_in_gap,ffn_out_gap,lffn,bound_holds\n";
    memory << "pair_u,pair_v,block,mem_dist\n";
    int violations = 0;
    for (const PairCollapse& pc : report.pairs) {
        for (size_t l = 0; l < pc.layer_dist.size(); ++l) {
            layers << pc.u << "," << pc.v << "," << l << "," << fmt(pc.layer_dist[l]) << ","
                   << static_cast<int>(pc.collapsed[l]) << "\n";
        }
        for (size_t l = 0; l < pc.ffn_out_gap.size(); ++l) {
            const bool ok = pc.ffn_out_gap[l] <= report.lffn[l] * pc.ffn_in_gap[l] + 1e-12;
            if (!ok) ++violations;
            ffn << pc.u << "," << pc.v << "," << l << "," << fmt(pc.ffn_in_gap[l]) << ","
                << fmt(pc.ffn_out_gap[l]) << "," << fmt(report.lffn[l]) << "," << (ok ? 1 : 0)
                << "\n";
        }
        for (size_t k = 0; k < pc.mem_dist.size(); ++k) {
            memory << pc.u << "," << pc.v << "," << k << "," << fmt(pc.mem_dist[k]) << "\n";
        }
    }
    write_text(cli.out("collapse_layers.csv"), layers.str());
    write_text(cli.out("collapse_ffn.csv"), ffn.str());
    write_text(cli.out("collapse_memory.csv"), memory.str());
    if (violations > 0) {
        std::cerr << "collapse: " << violations << " Lipschitz bound violations\n";
        return 1;
    }
    std::cout << "collapse: " << report.pairs.size() << " pairs over " << templates.size()
              << " templates\n";
    return 0;
}

int cmd_ablate(const Cli& cli, const std::string& ckpt, const std::string& corpus_path) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    if (model.tide_config().k_blocks < 1) throw ParamError("ablate: checkpoint has no memory");
    const auto [train, val] = split_corpus(tokens, cfg.get_double("train.val_fraction"));
    const auto report = layer_drop_ablation(model, val,
                                            static_cast<int>(cfg.get_int("train.seq_len")),
                                            cli.jobs);
    std::ostringstream csv;
    csv << "layer,intact_ppl,dropped_ppl,delta_abs,delta_pct\n";
    for (size_t l = 0; l < report.dropped_ppl.size(); ++l) {
        csv << l << "," << fmt(report.intact_ppl) << "," << fmt(report.dropped_ppl[l]) << ","
            << fmt(report.delta_abs[l]) << "," << fmt(report.delta_pct[l]) << "\n";
    }
    write_text(cli.out("ablate.csv"), csv.str());
    std::cout << "ablate: intact ppl " << fmt(report.intact_ppl) << ", "
              << report.dropped_ppl.size() << " layers\n";
    return 0;
}

int cmd_router_stats(const Cli& cli, const std::string& ckpt, const std::string& corpus_path) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    const auto [train, val] = split_corpus(tokens, cfg.get_double("train.val_fraction"));
    const auto bins = train_bins(cfg, train);
    const auto stats = router_stats(model, val, static_cast<int>(cfg.get_int("train.seq_len")),
                                    bins);
    std::ostringstream csv;
    csv << "layer,bin,tier,positions";
    for (int s = 0; s < stats.slots - 1; ++s) csv << ",alpha_" << s;
    csv << ",alpha_null\n";
    int violations = 0;
    for (size_t l = 0; l < stats.mean_alpha.size(); ++l) {
        for (int bin = 0; bin <= stats.bin_count; ++bin) {
            const size_t row = static_cast<size_t>(bin);
            if (stats.bin_positions[row] == 0) continue;
            csv << l << "," << (bin < stats.bin_count ? std::to_string(bin) : "unbinned") << ","
                << tier_or_empty(bin < stats.bin_count ? bin : -1, stats.bin_count) << ","
                << stats.bin_positions[row];
            double sum = 0.0;
            for (int s = 0; s < stats.slots; ++s) {
                csv << "," << fmt(stats.mean_alpha[l][row][static_cast<size_t>(s)]);
                sum += stats.mean_alpha[l][row][static_cast<size_t>(s)];
            }
            csv << "\n";
            if (std::abs(sum - 1.0) > 1e-9) ++violations;
        }
    }
    write_text(cli.out("router_stats.csv"), csv.str());
    if (violations > 0) {
        std::cerr << "router-stats: " << violations << " simplex violations\n";
        return 1;
    }
    std::cout << "router-stats: " << stats.mean_alpha.size() << " layers, " << stats.slots
              << " slots\n";
    return 0;
}

int cmd_knn(const Cli& cli, const std::string& ckpt, const std::string& corpus_path) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    if (model.tide_config().k_blocks < 1) throw ParamError("knn: checkpoint has no memory");
    const auto [train, val] = split_corpus(tokens, cfg.get_double("train.val_fraction"));
    const auto bins = train_bins(cfg, train);

    // half the queries from the rare tiers, half from the common tiers
    const int want = static_cast<int>(cfg.get_int("diag.knn_queries"));
    std::vector<int32_t> rare, common;
    for (int32_t v = 0; v < bins.vocab_size; ++v) {
        const int32_t b = bins.bins[static_cast<size_t>(v)];
        if (b < 0 || bins.bin_count != 10) continue;
        if (bin_tier(b) == kTierRare) rare.push_back(v);
        if (bin_tier(b) == kTierCommon) common.push_back(v);
    }
    std::mt19937_64 rng(static_cast<uint64_t>(cfg.get_int("diag.seed")));
    std::shuffle(rare.begin(), rare.end(), rng);
    std::shuffle(common.begin(), common.end(), rng);
    std::vector<int32_t> queries;
    for (int i = 0; i < want / 2 && i < static_cast<int>(rare.size()); ++i) {
        queries.push_back(rare[static_cast<size_t>(i)]);
    }
    for (int i = 0; i < want - want / 2 && i < static_cast<int>(common.size()); ++i) {
        queries.push_back(common[static_cast<size_t>(i)]);
    }
    if (queries.empty()) throw ParamError("knn: no binned queries available");

    std::vector<Tensor> tables = {model.base().embedding};
    for (const MemoryBlockParams& block : model.tide().blocks) {
        tables.push_back(memory_output_matrix(block, model.config().norm_eps));
    }
    const auto report = knn_jaccard(tables, queries, static_cast<int>(cfg.get_int("diag.knn_k")));

    std::ostringstream jc, nb;
    jc << "query,bin,tier,block,jaccard\n";
    for (size_t k = 0; k < report.jaccard.size(); ++k) {
        for (size_t q = 0; q < queries.size(); ++q) {
            const int32_t bin = bins.bins[static_cast<size_t>(queries[q])];
            jc << queries[q] << "," << bin << "," << tier_or_empty(bin, bins.bin_count) << ","
               << k << "," << fmt(report.jaccard[k][q]) << "\n";
        }
    }
    nb << "table,query,rank,neighbor\n";
    for (size_t t = 0; t < report.neighbors.size(); ++t) {
        const std::string tname = t == 0 ? "E" : "M" + std::to_string(t - 1);
        for (size_t q = 0; q < queries.size(); ++q) {
            for (size_t r = 0; r < report.neighbors[t][q].size(); ++r) {
                nb << tname << "," << queries[q] << "," << r << "," << report.neighbors[t][q][r]
                   << "\n";
            }
        }
    }
    write_text(cli.out("knn_jaccard.csv"), jc.str());
    write_text(cli.out("knn_neighbors.csv"), nb.str());

    const auto matrix = embedding_cosine_matrix(tables);
    std::ostringstream cm;
    cm << "table_a,table_b,cosine_distance\n";
    const auto table_name = [](size_t i) {
        return i == 0 ? std::string("E") : "M" + std::to_string(i - 1);
    };
    for (size_t i = 0; i < matrix.size(); ++i) {
        for (size_t j = 0; j < matrix.size(); ++j) {
            cm << table_name(i) << "," << table_name(j) << "," << fmt(matrix[i][j]) << "\n";
        }
    }
    write_text(cli.out("knn_cosine_matrix.csv"), cm.str());
    std::cout << "knn: " << queries.size() << " queries, " << report.jaccard.size()
              << " blocks\n";
    return 0;
}

int cmd_compress(const Cli& cli, const std::string& ckpt, const std::string& corpus_path,
                 const std::string& mode_flag, double percent_flag, int rank_flag,
                 int bits_flag) {
    const ExperimentConfig cfg = cli.load();
    const auto tokens = load_corpus(cli, cfg, corpus_path);
    TideModel model = load_checkpoint(ckpt.empty() ? cli.out("ckpt_final.tideckpt").string()
                                                   : ckpt);
    if (model.tide_config().k_blocks < 1) throw ParamError("compress: checkpoint has no memory");
    const auto [train, val] = split_corpus(tokens, cfg.get_double("train.val_fraction"));
    const int seq_len = static_cast<int>(cfg.get_int("train.seq_len"));
    const std::string mode = mode_flag.empty() ? cfg.get_string("compress.mode") : mode_flag;

    std::ostringstream csv;
    csv << "mode,percent,rank,bits,base_ppl,ppl,delta_abs,delta_pct\n";
    if (mode == "lowrank") {
        std::vector<double> percents;
        if (percent_flag >= 0.0) {
            percents.push_back(percent_flag);
        } else if (rank_flag > 0) {
            const double db = static_cast<double>(model.tide_config().d_block);
            percents.push_back(100.0 * (1.0 - static_cast<double>(rank_flag) / db));
        } else {
            percents = cfg.compress_percents();
        }
        const auto report = compressed_eval_lowrank(model, percents, val, seq_len, cli.jobs);
        for (const SweepPoint& p : report.points) {
            csv << "lowrank," << fmt(p.percent) << "," << p.rank << ",," << fmt(report.base_ppl)
                << "," << fmt(p.ppl) << "," << fmt(p.delta_abs) << "," << fmt(p.delta_pct)
                << "\n";
        }
        if (percents.size() == 1) {
            std::vector<std::pair<std::string, Tensor>> records;
            for (size_t k = 0; k < model.tide().blocks.size(); ++k) {
                const auto f = lowrank_compress(model.tide().blocks[k].table,
                                                report.points[0].rank);
                records.emplace_back("mem.k." + std::to_string(k) + ".U", f.u);
                records.emplace_back("mem.k." + std::to_string(k) + ".V", f.v);
            }
            save_tensor_records(cli.out("compressed.tideckpt").string(), model.config(),
                                model.tide_config(), records);
        }
    } else if (mode == "quantize") {
        const int bits = bits_flag > 0 ? bits_flag : static_cast<int>(cfg.get_int("compress.bits"));
        const auto report = compressed_eval_quant(model, {bits}, val, seq_len);
        for (const QuantPoint& p : report.points) {
            csv << "quantize,,," << p.bits << "," << fmt(report.base_ppl) << "," << fmt(p.ppl)
                << "," << fmt(p.delta_abs) << "," << fmt(p.delta_pct) << "\n";
        }
        std::vector<std::pair<std::string, Tensor>> records;
        for (size_t k = 0; k < model.tide().blocks.size(); ++k) {
            const auto q = quantize_table(model.tide().blocks[k].table, bits);
            Tensor codes({static_cast<int>(q.rows), static_cast<int>(q.cols)});
            for (int64_t i = 0; i < codes.size(); ++i) {
                codes.data()[i] = static_cast<double>(q.codes[static_cast<size_t>(i)]);
            }
            Tensor scales({static_cast<int>(q.rows)});
            std::copy(q.scales.begin(), q.scales.end(), scales.data());
            records.emplace_back("mem.k." + std::to_string(k) + ".q" + std::to_string(bits),
                                 codes);
            records.emplace_back("mem.k." + std::to_string(k) + ".scales", scales);
        }
        save_tensor_records(cli.out("compressed.tideckpt").string(), model.config(),
                            model.tide_config(), records);
    } else {
        throw ParamError("compress: mode must be lowrank or quantize");
    }
    write_text(cli.out("compress.csv"), csv.str());
    std::cout << "compress: mode " << mode << " done\n";
    return 0;
}

int cmd_footprint(const Cli& cli) {
    const ExperimentConfig cfg = cli.load();
    const ModelConfig mc = cfg.model_config();
    const TideConfig tc = cfg.tide_config();
    const FootprintReport report = footprint_report(mc, tc);
    std::ostringstream csv;
    csv << "group,params,bytes_16bit,bytes_8bit,bytes_4bit\n";
    const auto row = [&](const char* name, const FootprintGroup& g) {
        csv << name << "," << g.params << "," << g.bytes(16) << "," << g.bytes(8) << ","
            << g.bytes(4) << "\n";
    };
    row("base", report.base);
    row("memory", report.memory);
    row("router", report.router);
    FootprintGroup total{report.total_params()};
    row("total", total);
    write_text(cli.out("footprint.csv"), csv.str());
    std::cout << csv.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TIDE laboratory: corpus, training, diagnostics, compression"};
    app.require_subcommand(1);
    Cli cli;
    app.add_option("--config", cli.config_path, "experiment config file");
    app.add_option("--seed", cli.seed, "override corpus/train/diag seeds");
    app.add_option("--out", cli.out_dir, "output directory");
    app.add_option("--jobs", cli.jobs, "workers for independent evaluations");

    auto* corpus_cmd = app.add_subcommand("corpus", "generate the Zipf corpus and bin table");

    std::string arch, resume, corpus_path, ckpt, mode;
    int k_flag = -1, rank_flag = 0, bits_flag = 0;
    int64_t steps_flag = -1;
    double percent_flag = -1.0;

    auto* train_cmd = app.add_subcommand("train", "train a model on a token stream");
    train_cmd->add_option("--arch", arch, "base or tide");
    train_cmd->add_option("--k", k_flag, "MemoryBlock count (tide)");
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");
    train_cmd->add_option("--corpus", corpus_path, "token stream path");

    auto* audit_cmd = app.add_subcommand("audit", "per-token gradient audit");
    audit_cmd->add_option("--checkpoint", ckpt);
    audit_cmd->add_option("--corpus", corpus_path);
    audit_cmd->add_option("--steps", steps_flag);

    auto* collapse_cmd = app.add_subcommand("collapse", "hidden-state collapse scan");
    collapse_cmd->add_option("--checkpoint", ckpt);

    auto* ablate_cmd = app.add_subcommand("ablate", "per-layer memory-drop perplexity");
    ablate_cmd->add_option("--checkpoint", ckpt);
    ablate_cmd->add_option("--corpus", corpus_path);

    auto* router_cmd = app.add_subcommand("router-stats", "per-bin routing weights");
    router_cmd->add_option("--checkpoint", ckpt);
    router_cmd->add_option("--corpus", corpus_path);

    auto* knn_cmd = app.add_subcommand("knn", "top-k cosine neighbor overlap");
    knn_cmd->add_option("--checkpoint", ckpt);
    knn_cmd->add_option("--corpus", corpus_path);

    auto* compress_cmd = app.add_subcommand("compress", "MemoryBlock compression sweep");
    compress_cmd->add_option("--checkpoint", ckpt);
    compress_cmd->add_option("--corpus", corpus_path);
    compress_cmd->add_option("--mode", mode, "lowrank or quantize");
    compress_cmd->add_option("--percent", percent_flag, "single reduction percent");
    compress_cmd->add_option("--rank", rank_flag, "explicit rank");
    compress_cmd->add_option("--bits", bits_flag, "quantization width");

    auto* footprint_cmd = app.add_subcommand("footprint", "parameter and byte breakdown");

    CLI11_PARSE(app, argc, argv);
    try {
        if (corpus_cmd->parsed()) return cmd_corpus(cli);
        if (train_cmd->parsed()) return cmd_train(cli, arch, k_flag, resume, corpus_path);
        if (audit_cmd->parsed()) return cmd_audit(cli, ckpt, corpus_path, steps_flag);
        if (collapse_cmd->parsed()) return cmd_collapse(cli, ckpt);
        if (ablate_cmd->parsed()) return cmd_ablate(cli, ckpt, corpus_path);
        if (router_cmd->parsed()) return cmd_router_stats(cli, ckpt, corpus_path);
        if (knn_cmd->parsed()) return cmd_knn(cli, ckpt, corpus_path);
        if (compress_cmd->parsed()) {
            return cmd_compress(cli, ckpt, corpus_path, mode, percent_flag, rank_flag, bits_flag);
        }
        if (footprint_cmd->parsed()) return cmd_footprint(cli);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no command\n";
    return 1;
}
