#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "coverid/retrieval.hpp"
#include "coverid/rng.hpp"

using namespace coverid;
namespace fs = std::filesystem;

namespace {

std::vector<float> unit(std::vector<float> v) {
    double n = 0;
    for (float x : v) n += static_cast<double>(x) * x;
    n = std::sqrt(n);
    for (float& x : v) x = static_cast<float>(x / n);
    return v;
}

// Independent metric implementation used as the oracle: same definitions,
// written directly from them rather than sharing code with the library.
struct BruteMetrics {
    double map = 0, p10 = 0, mr1 = 0;
    size_t scored = 0;
};

BruteMetrics brute_force(const EmbeddingStore& store,
                         const std::map<std::string, std::string>& clique,
                         bool exclude_self) {
    BruteMetrics m;
    double sum_ap = 0, sum_p10 = 0, sum_mr1 = 0;
    for (const auto& q : store.records) {
        struct Cand { double sim; std::string id; bool rel; };
        std::vector<Cand> cands;
        for (const auto& r : store.records) {
            if (exclude_self && r.id == q.id) continue;
            cands.push_back({cosine_similarity(q.vec, r.vec), r.id,
                             clique.at(r.id) == clique.at(q.id)});
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.sim != b.sim) return a.sim > b.sim;
            return a.id < b.id;
        });
        size_t n_rel = 0;
        for (const auto& c : cands) n_rel += c.rel ? 1 : 0;
        if (n_rel == 0) continue;
        ++m.scored;
        size_t hits = 0, first = 0;
        double ap = 0;
        for (size_t k = 0; k < cands.size(); ++k) {
            if (cands[k].rel) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(k + 1);
                if (first == 0) first = k + 1;
            }
        }
        ap /= static_cast<double>(n_rel);
        size_t top = std::min<size_t>(10, cands.size());
        size_t top_hits = 0;
        for (size_t k = 0; k < top; ++k) top_hits += cands[k].rel ? 1 : 0;
        sum_ap += ap;
        sum_p10 += static_cast<double>(top_hits) / 10.0;
        sum_mr1 += static_cast<double>(first);
    }
    m.map = sum_ap / m.scored;
    m.p10 = sum_p10 / m.scored;
    m.mr1 = sum_mr1 / m.scored;
    return m;
}

}  // namespace

TEST_CASE("cosine similarity hand values and properties") {
    CHECK(cosine_similarity({1, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_similarity({1, 0}, {1, 1}) == doctest::Approx(0.70711).epsilon(1e-4));
    CHECK(cosine_similarity({1, 2}, {3, -1}) ==
          doctest::Approx(cosine_similarity({3, -1}, {1, 2})));
    CHECK(cosine_similarity({2, 4}, {3, -1}) ==
          doctest::Approx(cosine_similarity({1, 2}, {3, -1})));  // scale invariance
    CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 0}), std::runtime_error);
    CHECK_THROWS_AS(cosine_similarity({1, 0}, {1, 0, 0}), std::runtime_error);
}

TEST_CASE("average precision hand values") {
    // relevant at ranks 1, 3, 6 of 10
    std::vector<bool> rel(10, false);
    rel[0] = rel[2] = rel[5] = true;
    CHECK(average_precision(rel) == doctest::Approx((1.0 + 2.0 / 3 + 0.5) / 3).epsilon(1e-5));

    std::vector<bool> top(6, false);
    top[0] = top[1] = true;
    CHECK(average_precision(top) == doctest::Approx(1.0));

    std::vector<bool> single(8, false);
    single[4] = true;  // rank 5
    CHECK(average_precision(single) == doctest::Approx(1.0 / 5));

    CHECK_THROWS_AS(average_precision(std::vector<bool>(3, false)), std::runtime_error);
}

TEST_CASE("rank_all orders by similarity with id tie-break") {
    EmbeddingStore refs;
    refs.add("b", unit({1, 0}));
    refs.add("a", unit({1, 0}));       // ties with b -> id order a < b
    refs.add("c", unit({0, 1}));
    EmbeddingStore q;
    q.add("query", unit({1, 0.1f}));
    auto ranked = rank_all(q, refs, false);
    REQUIRE(ranked.size() == 1);
    CHECK(ranked[0] == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("exclude_self removes the query from its own ranking") {
    EmbeddingStore s;
    s.add("x", unit({1, 0}));
    s.add("y", unit({0.9f, 0.1f}));
    auto ranked = rank_all(s, s, true);
    CHECK(ranked[0] == std::vector<std::string>{"y"});
    CHECK(ranked[1] == std::vector<std::string>{"x"});
}

TEST_CASE("evaluate: perfect store and counted P@10") {
    EmbeddingStore s;
    s.add("a1", unit({1, 0, 0}));
    s.add("a2", unit({0.99f, 0.01f, 0}));
    s.add("b1", unit({0, 1, 0}));
    s.add("b2", unit({0.01f, 0.99f, 0}));
    std::map<std::string, std::string> clique{
        {"a1", "A"}, {"a2", "A"}, {"b1", "B"}, {"b2", "B"}};
    EvalReport rep = evaluate(s, s, clique, true);
    CHECK(rep.map == doctest::Approx(1.0));
    CHECK(rep.mr1 == doctest::Approx(1.0));
    CHECK(rep.p_at_10 == doctest::Approx(0.1));  // 1 relevant each, /10 always
    CHECK(rep.n_queries_scored == 4);

    std::map<std::string, std::string> missing{{"a1", "A"}};
    CHECK_THROWS_AS(evaluate(s, s, missing, true), std::runtime_error);
}

TEST_CASE("metric oracle: 200 random instances agree exactly") {
    Rng rng(777);
    for (int inst = 0; inst < 200; ++inst) {
        const size_t n = static_cast<size_t>(rng.uniform_int(4, 32));
        const size_t n_cliques = static_cast<size_t>(rng.uniform_int(2, 6));
        const size_t dim = 6;
        EmbeddingStore s;
        std::map<std::string, std::string> clique;
        for (size_t i = 0; i < n; ++i) {
            std::vector<float> v(dim);
            for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
            char id[16];
            std::snprintf(id, sizeof(id), "t%03zu", i);
            s.add(id, unit(v));
            clique[id] = "c" + std::to_string(rng.uniform_int(0, static_cast<int64_t>(n_cliques) - 1));
        }
        const bool exclude_self = (inst % 2 == 0);
        BruteMetrics oracle = brute_force(s, clique, exclude_self);
        if (oracle.scored == 0) {
            CHECK_THROWS_AS(evaluate(s, s, clique, exclude_self), std::runtime_error);
            continue;
        }
        EvalReport rep = evaluate(s, s, clique, exclude_self);
        CHECK(rep.map == oracle.map);
        CHECK(rep.p_at_10 == oracle.p10);
        CHECK(rep.mr1 == oracle.mr1);
        CHECK(rep.n_queries_scored == oracle.scored);
    }
}

TEST_CASE("metrics are invariant under monotone similarity transforms") {
    // scaling every vector by the same positive constant leaves cosine
    // ordering unchanged; metrics must not move
    Rng rng(778);
    EmbeddingStore a, b;
    std::map<std::string, std::string> clique;
    for (size_t i = 0; i < 12; ++i) {
        std::vector<float> v(5);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
        std::string id = "r" + std::to_string(i);
        a.add(id, v);
        std::vector<float> w = v;
        for (auto& x : w) x *= 3.0f;
        b.add(id, w);
        clique[id] = "c" + std::to_string(i % 3);
    }
    EvalReport ra = evaluate(a, a, clique, true);
    EvalReport rb = evaluate(b, b, clique, true);
    CHECK(ra.map == rb.map);
    CHECK(ra.p_at_10 == rb.p_at_10);
    CHECK(ra.mr1 == rb.mr1);
}

TEST_CASE("embedding file round trip and failure modes") {
    EmbeddingStore s;
    Rng rng(9);
    for (int i = 0; i < 5; ++i) {
        std::vector<float> v(7);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
        s.add("id" + std::to_string(i), unit(v));
    }
    const std::string path = (fs::temp_directory_path() / "store.emb").string();
    write_embeddings(path, s);
    EmbeddingStore r = read_embeddings(path);
    REQUIRE(r.records.size() == 5);
    CHECK(r.dim == 7);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(r.records[i].id == s.records[i].id);
        CHECK(r.records[i].vec == s.records[i].vec);
    }

    std::ofstream(path, std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(read_embeddings(path), std::runtime_error);
    CHECK_THROWS_AS(read_embeddings("/nonexistent.emb"), std::runtime_error);
}

TEST_CASE("extract_embedding is unit-norm, deterministic, right-sized") {
    ResNetIbnModel<float> model(ModelConfig::mini(3), 17);
    Rng rng(10);
    CqtSpectrogram cqt;
    cqt.n_frames = 20;
    cqt.values.resize(84 * 20);
    for (auto& v : cqt.values) v = static_cast<float>(rng.uniform(0.0, 1.0));
    auto e1 = extract_embedding(model, cqt, false);
    auto e2 = extract_embedding(model, cqt, false);
    CHECK(e1 == e2);
    CHECK(e1.size() == 128);
    double n = 0;
    for (float x : e1) n += static_cast<double>(x) * x;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(extract_embedding(model, cqt, true), std::runtime_error);

    ModelConfig cfg = ModelConfig::mini(3);
    cfg.embed_dim = 32;
    ResNetIbnModel<float> proj_model(cfg, 17);
    CHECK(extract_embedding(proj_model, cqt, true).size() == 32);
}

TEST_CASE("transposed_max_similarity recovers vertical shifts") {
    ResNetIbnModel<float> model(ModelConfig::mini(3), 23);
    Rng rng(11);
    CqtSpectrogram q;
    q.n_frames = 16;
    q.values.assign(84 * 16, 0.0f);
    // banded support well inside [0, 84) so +-3 shifts lose nothing
    for (size_t b = 20; b < 50; ++b)
        for (size_t t = 0; t < 16; ++t)
            q.at(b, t) = static_cast<float>(rng.uniform(0.2, 1.0));

    // range 0 equals the plain cosine of the two embeddings
    CqtSpectrogram r = shift_cqt_bins(q, 3);
    const double plain = cosine_similarity(extract_embedding(model, q, false),
                                           extract_embedding(model, r, false));
    CHECK(transposed_max_similarity(model, q, r, 0) == doctest::Approx(plain));

    // R = Q -> the i=0 member of the max gives exactly 1
    CHECK(transposed_max_similarity(model, q, q, 6) == doctest::Approx(1.0));

    // R = Q shifted +3: some i in [-6, 6] undoes it exactly
    CHECK(transposed_max_similarity(model, q, r, 6) == doctest::Approx(1.0));
    CHECK(transposed_max_similarity(model, q, r, 6) >= plain);
}
