#include "tide/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

namespace tide {

ExpectedUpdates expected_updates(double f_v, int64_t batch, int64_t seq, double tau) {
    if (f_v <= 0.0 || f_v > 1.0) throw ParamError("expected_updates: f_v must lie in (0,1]");
    if (batch < 1 || seq < 1 || tau <= 0.0) {
        throw ParamError("expected_updates: batch, seq and tau must be positive");
    }
    ExpectedUpdates out;
    const double bt = static_cast<double>(batch) * static_cast<double>(seq);
    out.exact = tau * (-std::expm1(bt * std::log1p(-f_v)));
    out.approx = tau * f_v * bt;
    out.approx_rel_error = std::abs(out.approx - out.exact) / out.exact;
    return out;
}

GradRatioBound grad_ratio_bound(double eps_f, double c, int64_t batch, int64_t seq, double g2,
                                double g2_min) {
    if (!(0.0 < eps_f && eps_f <= c && c < 1.0)) {
        throw ParamError("grad_ratio_bound: need 0 < eps <= c < 1");
    }
    if (batch < 1 || seq < 1 || g2 <= 0.0 || g2_min <= 0.0) {
        throw ParamError("grad_ratio_bound: degenerate constants");
    }
    GradRatioBound out;
    const double bt = static_cast<double>(batch) * static_cast<double>(seq);
    out.one_minus_kappa = std::exp(bt * std::log1p(-c));
    out.kappa = -std::expm1(bt * std::log1p(-c));
    out.eps_over_c = eps_f / c;
    out.bound = eps_f * bt * g2 / (out.kappa * g2_min);
    return out;
}

// ---------------------------------------------------------------------------

GradAuditor::GradAuditor(const TideModel& model) {
    audit_.vocab_size = model.config().vocab_size;
    audit_.k_blocks = model.tide_config().k_blocks;
    audit_.occurrences.assign(static_cast<size_t>(audit_.vocab_size), 0);
    audit_.primary_sq_norm.assign(static_cast<size_t>(audit_.vocab_size), 0.0);
    audit_.block_sq_norm.assign(static_cast<size_t>(audit_.k_blocks),
                                std::vector<double>(static_cast<size_t>(audit_.vocab_size), 0.0));
    audit_.cofired.assign(static_cast<size_t>(audit_.vocab_size), 0);
    audit_.g2_min = std::numeric_limits<double>::infinity();
}

void GradAuditor::on_step(const TrainStepInfo& info) {
    ++audit_.steps;
    const Tensor& emb = info.model.base().embedding;
    const int64_t d = emb.dim(1);
    const double* ge = emb.grad();
    // full-table accumulation keeps the absent-row == 0 property observable
    std::vector<double> primary_row(static_cast<size_t>(audit_.vocab_size), 0.0);
    for (int64_t v = 0; v < audit_.vocab_size; ++v) {
        double sq = 0.0;
        const double* row = ge + v * d;
        for (int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
        primary_row[static_cast<size_t>(v)] = sq;
        audit_.primary_sq_norm[static_cast<size_t>(v)] += sq;
    }
    std::vector<std::vector<double>> block_row(static_cast<size_t>(audit_.k_blocks));
    for (int k = 0; k < audit_.k_blocks; ++k) {
        const Tensor& table = info.model.tide().blocks[static_cast<size_t>(k)].table;
        const int64_t db = table.dim(1);
        const double* gt = table.grad();
        block_row[static_cast<size_t>(k)].assign(static_cast<size_t>(audit_.vocab_size), 0.0);
        for (int64_t v = 0; v < audit_.vocab_size; ++v) {
            double sq = 0.0;
            const double* row = gt + v * db;
            for (int64_t j = 0; j < db; ++j) sq += row[j] * row[j];
            block_row[static_cast<size_t>(k)][static_cast<size_t>(v)] = sq;
            audit_.block_sq_norm[static_cast<size_t>(k)][static_cast<size_t>(v)] += sq;
        }
    }
    std::set<int32_t> present(info.batch.ids.begin(), info.batch.ids.end());
    for (int32_t v : present) {
        ++audit_.occurrences[static_cast<size_t>(v)];
        const double sq = primary_row[static_cast<size_t>(v)];
        audit_.g2_max = std::max(audit_.g2_max, sq);
        if (!g2_seen_ || sq < audit_.g2_min) audit_.g2_min = sq;
        g2_seen_ = true;
        bool all_fired = true;
        for (int k = 0; k < audit_.k_blocks; ++k) {
            all_fired = all_fired && block_row[static_cast<size_t>(k)][static_cast<size_t>(v)] > 0.0;
        }
        if (audit_.k_blocks > 0 && all_fired) ++audit_.cofired[static_cast<size_t>(v)];
    }
}

GradAudit run_grad_audit(Trainer& trainer, int64_t steps,
                         const std::function<TokenBatch()>& next_batch) {
    GradAuditor auditor(trainer.model());
    const StepObserver observer = [&](const TrainStepInfo& info) { auditor.on_step(info); };
    for (int64_t s = 0; s < steps; ++s) {
        if (next_batch) {
            trainer.step_on_batch(next_batch(), observer);
        } else {
            trainer.run_step(observer);
        }
    }
    return auditor.audit();
}

std::vector<OccurrenceCheck> occurrence_vs_formula(const GradAudit& audit,
                                                   const std::vector<double>& f, int64_t batch,
                                                   int64_t seq) {
    if (static_cast<int>(f.size()) != audit.vocab_size) {
        throw ParamError("occurrence_vs_formula: probability vector size mismatch");
    }
    const double bt = static_cast<double>(batch) * static_cast<double>(seq);
    std::vector<OccurrenceCheck> checks(f.size());
    for (size_t v = 0; v < f.size(); ++v) {
        OccurrenceCheck& c = checks[v];
        c.probability = f[v] > 0.0 ? -std::expm1(bt * std::log1p(-f[v])) : 0.0;
        c.expected = static_cast<double>(audit.steps) * c.probability;
        c.sigma = std::sqrt(static_cast<double>(audit.steps) * c.probability *
                            (1.0 - c.probability));
        const double dev = std::abs(static_cast<double>(audit.occurrences[v]) - c.expected);
        c.within_3sigma = dev <= 3.0 * c.sigma || (c.sigma == 0.0 && dev == 0.0);
    }
    return checks;
}

double fraction_within_3sigma(const std::vector<OccurrenceCheck>& checks) {
    if (checks.empty()) return 1.0;
    int64_t ok = 0;
    for (const auto& c : checks) ok += c.within_3sigma ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(checks.size());
}

// ---------------------------------------------------------------------------

std::vector<ProbeTemplate> make_templates(int count, int length, int vocab_size, uint64_t seed) {
    if (count < 1 || length < 1) throw ParamError("make_templates: count and length positive");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int32_t> tok(0, vocab_size - 1);
    std::vector<ProbeTemplate> templates(static_cast<size_t>(count));
    for (ProbeTemplate& t : templates) {
        t.tokens.resize(static_cast<size_t>(length));
        for (int32_t& id : t.tokens) id = tok(rng);
        t.slot = length - 1;
    }
    return templates;
}

namespace {

std::vector<double> slot_vector(const Tensor& t, int slot, int d) {
    std::vector<double> out(static_cast<size_t>(d));
    const double* p = t.data() + static_cast<int64_t>(slot) * d;
    std::copy(p, p + d, out.begin());
    return out;
}

double l2_gap(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

CollapseReport collapse_scan(const TideModel& model, const std::vector<ProbeTemplate>& templates,
                             const std::vector<std::pair<int32_t, int32_t>>& pairs,
                             double delta_tol) {
    const ModelConfig& cfg = model.config();
    for (const ProbeTemplate& t : templates) {
        if (t.slot < 0 || t.slot >= static_cast<int>(t.tokens.size())) {
            throw ParamError("collapse_scan: template slot missing or out of range");
        }
    }
    CollapseReport report;
    report.delta_tol = delta_tol;
    for (int l = 0; l < cfg.n_layers; ++l) report.lffn.push_back(ffn_lipschitz_upper(model, l));

    const int layers = cfg.n_layers;
    const int d = cfg.d_model;
    for (const auto& [u, v] : pairs) {
        PairCollapse pc;
        pc.u = u;
        pc.v = v;
        pc.layer_dist.assign(static_cast<size_t>(layers) + 1, 0.0);
        pc.ffn_in_gap.assign(static_cast<size_t>(layers), 0.0);
        pc.ffn_out_gap.assign(static_cast<size_t>(layers), 0.0);
        for (const ProbeTemplate& tmpl : templates) {
            TokenBatch bu, bv;
            bu.batch = bv.batch = 1;
            bu.seq = bv.seq = static_cast<int>(tmpl.tokens.size());
            bu.ids = tmpl.tokens;
            bv.ids = tmpl.tokens;
            bu.ids[static_cast<size_t>(tmpl.slot)] = u;
            bv.ids[static_cast<size_t>(tmpl.slot)] = v;
            Tape tu(false), tv(false);
            ForwardOptions opt;
            opt.keep_trace = true;
            ForwardTrace tr_u = model.forward(tu, bu, opt);
            ForwardTrace tr_v = model.forward(tv, bv, opt);
            for (int l = 0; l <= layers; ++l) {
                pc.layer_dist[static_cast<size_t>(l)] +=
                    l2_gap(slot_vector(tr_u.h[static_cast<size_t>(l)], tmpl.slot, d),
                           slot_vector(tr_v.h[static_cast<size_t>(l)], tmpl.slot, d));
            }
            for (int l = 0; l < layers; ++l) {
                const auto nu = slot_vector(tr_u.n_post_attn[static_cast<size_t>(l)], tmpl.slot, d);
                const auto nv = slot_vector(tr_v.n_post_attn[static_cast<size_t>(l)], tmpl.slot, d);
                pc.ffn_in_gap[static_cast<size_t>(l)] += l2_gap(nu, nv);
                pc.ffn_out_gap[static_cast<size_t>(l)] +=
                    l2_gap(model.ffn_apply(l, nu), model.ffn_apply(l, nv));
            }
        }
        const double inv = 1.0 / static_cast<double>(templates.size());
        for (double& x : pc.layer_dist) x *= inv;
        for (double& x : pc.ffn_in_gap) x *= inv;
        for (double& x : pc.ffn_out_gap) x *= inv;
        for (double x : pc.layer_dist) pc.collapsed.push_back(x <= delta_tol ? 1 : 0);
        for (int k = 0; k < model.tide_config().k_blocks; ++k) {
            pc.mem_dist.push_back(measure_separation(model.tide().blocks[static_cast<size_t>(k)],
                                                     u, v, cfg.norm_eps));
        }
        report.pairs.push_back(std::move(pc));
    }
    return report;
}

FfnBoundReport ffn_lower_bound_check(const TideModel& model, int layer,
                                     std::span<const double> h_u, std::span<const double> h_v,
                                     double target_c) {
    FfnBoundReport report;
    std::vector<double> u(h_u.begin(), h_u.end());
    std::vector<double> v(h_v.begin(), h_v.end());
    report.delta = l2_gap(u, v);
    double nu = 0.0, nv = 0.0;
    for (double x : u) nu += x * x;
    for (double x : v) nv += x * x;
    const LayerParams& lp = model.base().layers.at(static_cast<size_t>(layer));
    double gmax = 0.0;
    for (double g : lp.ffn_norm.values()) gmax = std::max(gmax, std::abs(g));
    const double radius = std::max({std::sqrt(static_cast<double>(model.config().d_model)) * gmax,
                                    std::sqrt(nu), std::sqrt(nv)});
    report.lffn = ffn_lipschitz_detail(lp, radius).bound;
    report.ffn_gap = l2_gap(model.ffn_apply(layer, u), model.ffn_apply(layer, v));
    report.lip_rhs = report.lffn * report.delta;
    report.vacuous = target_c <= report.lip_rhs;
    report.floor_value = report.vacuous ? 0.0 : 0.5 * (target_c - report.lip_rhs);
    return report;
}

// ---------------------------------------------------------------------------

double measure_separation(const MemoryBlockParams& block, int32_t u, int32_t v, double eps) {
    return l2_gap(memory_block_output(block, u, eps), memory_block_output(block, v, eps));
}

void set_separation(MemoryBlockParams& block, int32_t u, int32_t v, double target_c, double eps) {
    if (u == v) throw ParamError("set_separation: u and v must differ");
    const int64_t db = block.table.dim(1);
    if (db < 2) throw ParamError("set_separation: needs d_b >= 2");
    if (target_c <= 0.0) throw ParamError("set_separation: target separation must be positive");
    const double* gain = block.gain.data();
    int64_t j_star = 0;
    for (int64_t j = 1; j < db; ++j) {
        if (std::abs(gain[j]) > std::abs(gain[j_star])) j_star = j;
    }
    const double gmax = std::abs(gain[j_star]);
    if (gmax == 0.0) throw ParamError("set_separation: block gain is identically zero");
    const int64_t j_base = j_star == 0 ? 1 : 0;

    const double a = 1e9;  // large rows make the norm eps negligible
    const double scale = a / std::sqrt(a * a / static_cast<double>(db) + eps);
    double ratio = target_c / (2.0 * gmax * scale);
    if (ratio > 1.0) {
        if (ratio > 1.0 + 1e-12) {
            throw ParamError("set_separation: target " + std::to_string(target_c) +
                             " exceeds achievable 2*gain*sqrt(d_b)");
        }
        ratio = 1.0;
    }
    const double phi = std::asin(ratio);
    double* row_u = block.table.data() + static_cast<int64_t>(u) * db;
    double* row_v = block.table.data() + static_cast<int64_t>(v) * db;
    std::fill(row_u, row_u + db, 0.0);
    std::fill(row_v, row_v + db, 0.0);
    row_u[j_base] = a * std::cos(phi);
    row_u[j_star] = a * std::sin(phi);
    row_v[j_base] = a * std::cos(phi);
    row_v[j_star] = -a * std::sin(phi);
}

// ---------------------------------------------------------------------------

LayerDropReport layer_drop_ablation(const TideModel& model, const std::vector<int32_t>& tokens,
                                    int seq_len, int jobs) {
    const int layers = model.config().n_layers;
    LayerDropReport report;
    report.intact_ppl = eval_perplexity(model, tokens, seq_len);
    report.dropped_ppl.assign(static_cast<size_t>(layers), 0.0);
    auto eval_layer = [&](int l) {
        std::vector<uint8_t> mask(static_cast<size_t>(layers), 0);
        mask[static_cast<size_t>(l)] = 1;
        ForwardOptions opt;
        opt.drop_memory_at_layer = &mask;
        report.dropped_ppl[static_cast<size_t>(l)] = eval_perplexity(model, tokens, seq_len, opt);
    };
    if (jobs <= 1 || layers <= 1) {
        for (int l = 0; l < layers; ++l) eval_layer(l);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int workers = std::min(jobs, layers);
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (int l = next.fetch_add(1); l < layers; l = next.fetch_add(1)) eval_layer(l);
            });
        }
        for (std::thread& t : pool) t.join();
    }
    for (int l = 0; l < layers; ++l) {
        const double dropped = report.dropped_ppl[static_cast<size_t>(l)];
        report.delta_abs.push_back(dropped - report.intact_ppl);
        report.delta_pct.push_back(100.0 * (dropped - report.intact_ppl) / report.intact_ppl);
    }
    return report;
}

RouterStats router_stats(const TideModel& model, const std::vector<int32_t>& tokens, int seq_len,
                         const FrequencyBinTable& bins) {
    const int layers = model.config().n_layers;
    const int slots = model.tide_config().k_blocks + 1;
    if (model.tide_config().k_blocks < 1) throw ParamError("router_stats: needs k_blocks >= 1");
    RouterStats stats;
    stats.bin_count = bins.bin_count;
    stats.slots = slots;
    stats.mean_alpha.assign(
        static_cast<size_t>(layers),
        std::vector<std::vector<double>>(static_cast<size_t>(bins.bin_count) + 1,
                                         std::vector<double>(static_cast<size_t>(slots), 0.0)));
    stats.bin_positions.assign(static_cast<size_t>(bins.bin_count) + 1, 0);
    ForwardOptions opt;
    opt.keep_trace = true;
    bool counted = false;
    eval_walk(model, tokens, seq_len, opt, [&](const ForwardTrace& trace, const TokenBatch& batch) {
        const int64_t positions = static_cast<int64_t>(batch.ids.size());
        for (int64_t p = 0; p < positions; ++p) {
            const int32_t id = batch.ids[static_cast<size_t>(p)];
            const int32_t bin = bins.bins[static_cast<size_t>(id)];
            const size_t row = bin >= 0 ? static_cast<size_t>(bin)
                                        : static_cast<size_t>(bins.bin_count);
            ++stats.bin_positions[row];
            for (int l = 0; l < layers; ++l) {
                const double* alpha = trace.alpha[static_cast<size_t>(l)].data() + p * slots;
                for (int s = 0; s < slots; ++s) {
                    stats.mean_alpha[static_cast<size_t>(l)][row][static_cast<size_t>(s)] +=
                        alpha[s];
                }
            }
        }
        counted = true;
    });
    if (!counted) throw ParamError("router_stats: no complete evaluation window");
    for (int l = 0; l < layers; ++l) {
        for (size_t row = 0; row <= static_cast<size_t>(bins.bin_count); ++row) {
            const int64_t n = stats.bin_positions[row];
            if (n == 0) continue;
            for (int s = 0; s < slots; ++s) {
                stats.mean_alpha[static_cast<size_t>(l)][row][static_cast<size_t>(s)] /=
                    static_cast<double>(n);
            }
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------

CosineDistance embedding_cosine_distance(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape()) {
        throw ShapeError("embedding_cosine_distance: tables must share (V, d)");
    }
    const int64_t v = a.dim(0), d = a.dim(1);
    CosineDistance out;
    double sum = 0.0;
    int64_t used = 0;
    for (int64_t r = 0; r < v; ++r) {
        const double* ra = a.data() + r * d;
        const double* rb = b.data() + r * d;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            dot += ra[j] * rb[j];
            na += ra[j] * ra[j];
            nb += rb[j] * rb[j];
        }
        if (na == 0.0 || nb == 0.0) {
            ++out.skipped;
            continue;
        }
        sum += dot / (std::sqrt(na) * std::sqrt(nb));
        ++used;
    }
    if (used == 0) throw ParamError("embedding_cosine_distance: all rows zero-norm");
    out.distance = 1.0 - sum / static_cast<double>(used);
    return out;
}

std::vector<std::vector<double>> embedding_cosine_matrix(const std::vector<Tensor>& tables) {
    const size_t n = tables.size();
    std::vector<std::vector<double>> matrix(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            matrix[i][j] = embedding_cosine_distance(tables[i], tables[j]).distance;
        }
    }
    return matrix;
}

Tensor memory_output_matrix(const MemoryBlockParams& block, double eps) {
    const int64_t v = block.table.dim(0), db = block.table.dim(1);
    Tensor out({static_cast<int>(v), static_cast<int>(db)});
    for (int64_t r = 0; r < v; ++r) {
        const auto row = memory_block_output(block, static_cast<int32_t>(r), eps);
        std::copy(row.begin(), row.end(), out.data() + r * db);
    }
    return out;
}

NeighborReport knn_jaccard(const std::vector<Tensor>& tables, const std::vector<int32_t>& queries,
                           int k_nn) {
    if (tables.empty()) throw ParamError("knn_jaccard: no tables");
    const int64_t v = tables[0].dim(0);
    if (k_nn < 1 || k_nn >= v) throw ParamError("knn_jaccard: need 1 <= k_nn < V");
    for (const Tensor& t : tables) {
        if (t.ndim() != 2 || t.dim(0) != v) throw ShapeError("knn_jaccard: table shape mismatch");
    }
    NeighborReport report;
    report.k_nn = k_nn;
    report.queries = queries;
    report.neighbors.resize(tables.size());

    for (size_t ti = 0; ti < tables.size(); ++ti) {
        const Tensor& table = tables[ti];
        const int64_t d = table.dim(1);
        std::vector<double> norms(static_cast<size_t>(v));
        for (int64_t r = 0; r < v; ++r) {
            double n2 = 0.0;
            const double* row = table.data() + r * d;
            for (int64_t j = 0; j < d; ++j) n2 += row[j] * row[j];
            norms[static_cast<size_t>(r)] = std::sqrt(n2);
        }
        for (int32_t q : queries) {
            if (q < 0 || q >= v) throw IndexError("knn_jaccard: query outside vocabulary");
            const double* rq = table.data() + static_cast<int64_t>(q) * d;
            std::vector<std::pair<double, int32_t>> scored;
            scored.reserve(static_cast<size_t>(v) - 1);
            for (int64_t r = 0; r < v; ++r) {
                if (r == q) continue;
                double cos = -2.0;  // zero-norm rows can never become neighbors
                if (norms[static_cast<size_t>(r)] > 0.0 &&
                    norms[static_cast<size_t>(q)] > 0.0) {
                    double dot = 0.0;
                    const double* row = table.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) dot += rq[j] * row[j];
                    cos = dot / (norms[static_cast<size_t>(q)] * norms[static_cast<size_t>(r)]);
                }
                scored.emplace_back(cos, static_cast<int32_t>(r));
            }
            std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            std::vector<int32_t> top;
            for (int i = 0; i < k_nn; ++i) top.push_back(scored[static_cast<size_t>(i)].second);
            report.neighbors[ti].push_back(std::move(top));
        }
    }

    for (size_t ti = 1; ti < tables.size(); ++ti) {
        std::vector<double> js;
        for (size_t qi = 0; qi < queries.size(); ++qi) {
            std::set<int32_t> a(report.neighbors[0][qi].begin(), report.neighbors[0][qi].end());
            std::set<int32_t> b(report.neighbors[ti][qi].begin(), report.neighbors[ti][qi].end());
            std::vector<int32_t> inter;
            std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                                  std::back_inserter(inter));
            const double uni = static_cast<double>(a.size() + b.size() - inter.size());
            js.push_back(static_cast<double>(inter.size()) / uni);
        }
        report.jaccard.push_back(std::move(js));
    }
    return report;
}

}  // namespace tide
