#include "coverid/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace coverid {

void EmbeddingStore::add(const std::string& id, std::vector<float> vec) {
    if (dim == 0) dim = vec.size();
    require(vec.size() == dim, "EmbeddingStore: dimension mismatch for id " + id);
    for (const auto& r : records)
        require(r.id != id, "EmbeddingStore: duplicate id " + id);
    records.push_back({id, std::move(vec)});
}

const EmbeddingStore::Record* EmbeddingStore::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

Tensor<float> cqt_to_input(const CqtSpectrogram& cqt) {
    Tensor<float> x({1, 1, static_cast<size_t>(kCqtBins), cqt.n_frames});
    for (size_t b = 0; b < kCqtBins; ++b)
        for (size_t t = 0; t < cqt.n_frames; ++t) x.at4(0, 0, b, t) = cqt.at(b, t);
    return x;
}

std::vector<float> extract_embedding(ResNetIbnModel<float>& model,
                                     const CqtSpectrogram& cqt, bool use_projection) {
    require(!use_projection || model.config().embed_dim > 0,
            "extract_embedding: projection head disabled in this model");
    Tape<float> tape;
    auto input = make_node<float>(cqt_to_input(cqt), /*requires_grad=*/false);
    auto out = model.forward(tape, input, NormMode::kEval);
    const auto& src = use_projection ? out.embedding->value : out.f_c->value;
    std::vector<float> v(src.data.begin(), src.data.end());
    double norm = 0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12)
        throw std::runtime_error("extract_embedding: degenerate zero embedding");
    for (float& x : v) x = static_cast<float>(x / norm);
    return v;
}

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    require(a.size() == b.size(), "cosine_similarity: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    require(na > 0 && nb > 0, "cosine_similarity: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::vector<std::string>> rank_all(const EmbeddingStore& queries,
                                               const EmbeddingStore& refs,
                                               bool exclude_self) {
    require(queries.dim == refs.dim, "rank_all: dimension mismatch");
    std::vector<std::vector<std::string>> out;
    out.reserve(queries.records.size());
    for (const auto& q : queries.records) {
        std::vector<std::pair<double, const std::string*>> scored;
        scored.reserve(refs.records.size());
        for (const auto& r : refs.records) {
            if (exclude_self && r.id == q.id) continue;
            scored.emplace_back(cosine_similarity(q.vec, r.vec), &r.id);
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return *a.second < *b.second;
        });
        std::vector<std::string> ids;
        ids.reserve(scored.size());
        for (auto& [s, id] : scored) ids.push_back(*id);
        out.push_back(std::move(ids));
    }
    return out;
}

double average_precision(const std::vector<bool>& rel) {
    size_t n_rel = 0;
    double sum = 0;
    for (size_t k = 0; k < rel.size(); ++k) {
        if (rel[k]) {
            ++n_rel;
            sum += static_cast<double>(n_rel) / static_cast<double>(k + 1);
        }
    }
    require(n_rel > 0, "average_precision: no relevant items");
    return sum / static_cast<double>(n_rel);
}

EvalReport evaluate(const EmbeddingStore& queries, const EmbeddingStore& refs,
                    const std::map<std::string, std::string>& clique_of,
                    bool exclude_self) {
    for (const auto& q : queries.records)
        require(clique_of.count(q.id) > 0, "evaluate: missing clique label for " + q.id);
    for (const auto& r : refs.records)
        require(clique_of.count(r.id) > 0, "evaluate: missing clique label for " + r.id);

    auto ranked = rank_all(queries, refs, exclude_self);
    EvalReport rep;
    double sum_ap = 0, sum_p10 = 0, sum_mr1 = 0;
    for (size_t qi = 0; qi < queries.records.size(); ++qi) {
        const auto& q = queries.records[qi];
        const std::string& clique = clique_of.at(q.id);
        std::vector<bool> rel(ranked[qi].size());
        size_t n_rel = 0;
        for (size_t k = 0; k < ranked[qi].size(); ++k) {
            rel[k] = (clique_of.at(ranked[qi][k]) == clique);
            if (rel[k]) ++n_rel;
        }
        if (n_rel == 0) continue;  // not scorable

        EvalReport::PerQuery pq;
        pq.id = q.id;
        pq.n_relevant = n_rel;
        pq.ap = average_precision(rel);
        for (size_t k = 0; k < rel.size(); ++k)
            if (rel[k]) { pq.rank_first_hit = k + 1; break; }
        size_t top = std::min<size_t>(10, rel.size());
        size_t hits = 0;
        for (size_t k = 0; k < top; ++k)
            if (rel[k]) ++hits;
        sum_ap += pq.ap;
        sum_p10 += static_cast<double>(hits) / 10.0;
        sum_mr1 += static_cast<double>(pq.rank_first_hit);
        rep.per_query.push_back(std::move(pq));
    }
    rep.n_queries_scored = rep.per_query.size();
    require(rep.n_queries_scored > 0, "evaluate: no scorable queries");
    rep.map = sum_ap / rep.n_queries_scored;
    rep.p_at_10 = sum_p10 / rep.n_queries_scored;
    rep.mr1 = sum_mr1 / rep.n_queries_scored;
    return rep;
}

double transposed_max_similarity(ResNetIbnModel<float>& model,
                                 const CqtSpectrogram& query,
                                 const CqtSpectrogram& reference, int shift_range,
                                 bool use_projection) {
    require(shift_range >= 0, "transposed_max_similarity: negative range");
    auto qe = extract_embedding(model, query, use_projection);
    double best = -2;
    for (int i = -shift_range; i <= shift_range; ++i) {
        auto re = extract_embedding(model, shift_cqt_bins(reference, i), use_projection);
        best = std::max(best, cosine_similarity(qe, re));
    }
    return best;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["map"] = map;
    j["p_at_10"] = p_at_10;
    j["mr1"] = mr1;
    j["n_queries_scored"] = n_queries_scored;
    j["per_query"] = nlohmann::json::array();
    for (const auto& pq : per_query) {
        j["per_query"].push_back({{"id", pq.id},
                                  {"ap", pq.ap},
                                  {"rank_first_hit", pq.rank_first_hit},
                                  {"n_relevant", pq.n_relevant}});
    }
    return j.dump(2);
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << "query                         AP      rank1  n_rel\n";
    for (const auto& pq : per_query) {
        os << pq.id;
        for (size_t i = pq.id.size(); i < 30; ++i) os << ' ';
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f  %5zu  %5zu\n", pq.ap, pq.rank_first_hit,
                      pq.n_relevant);
        os << buf;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "mAP %.4f   P@10 %.4f   MR1 %.2f   (%zu queries scored)\n", map,
                  p_at_10, mr1, n_queries_scored);
    os << buf;
    return os.str();
}

void write_embeddings(const std::string& path, const EmbeddingStore& store) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_embeddings: cannot open " + path);
    auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    f.write("EMB1", 4);
    w32(1);
    w32(static_cast<uint32_t>(store.dim));
    uint64_t count = store.records.size();
    f.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& r : store.records) {
        w32(static_cast<uint32_t>(r.id.size()));
        f.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
        f.write(reinterpret_cast<const char*>(r.vec.data()),
                static_cast<std::streamsize>(r.vec.size() * sizeof(float)));
    }
}

EmbeddingStore read_embeddings(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_embeddings: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "EMB1", 4) != 0)
        throw std::runtime_error("read_embeddings: bad magic in " + path);
    uint32_t version = 0, dim = 0;
    uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&dim), 4);
    f.read(reinterpret_cast<char*>(&count), 8);
    if (!f || version != 1)
        throw std::runtime_error("read_embeddings: unsupported version in " + path);
    EmbeddingStore store;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t idlen = 0;
        f.read(reinterpret_cast<char*>(&idlen), 4);
        std::string id(idlen, '\0');
        f.read(id.data(), idlen);
        std::vector<float> vec(dim);
        f.read(reinterpret_cast<char*>(vec.data()),
               static_cast<std::streamsize>(dim * sizeof(float)));
        if (!f) throw std::runtime_error("read_embeddings: truncated data in " + path);
        store.add(id, std::move(vec));
    }
    return store;
}

}  // namespace coverid
