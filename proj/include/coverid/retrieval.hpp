#ifndef COVERID_RETRIEVAL_HPP
#define COVERID_RETRIEVAL_HPP

#include <map>
#include <string>
#include <vector>

#include "coverid/cqt.hpp"
#include "coverid/model.hpp"

namespace coverid {

// Id-keyed set of fixed-length unit vectors.
struct EmbeddingStore {
    struct Record {
        std::string id;
        std::vector<float> vec;
    };
    std::vector<Record> records;
    size_t dim = 0;

    void add(const std::string& id, std::vector<float> vec);
    const Record* find(const std::string& id) const;
};

struct EvalReport {
    double map = 0;
    double p_at_10 = 0;
    double mr1 = 0;
    size_t n_queries_scored = 0;
    struct PerQuery {
        std::string id;
        double ap = 0;
        size_t rank_first_hit = 0;
        size_t n_relevant = 0;
    };
    std::vector<PerQuery> per_query;

    std::string to_json() const;
    std::string to_table() const;
};

// [N,1,84,T] single-item model input from a spectrogram
Tensor<float> cqt_to_input(const CqtSpectrogram& cqt);

// f_c (or the projected embedding when use_projection is set) of a
// full-length spectrogram, L2-normalized.  Model runs in eval mode.
std::vector<float> extract_embedding(ResNetIbnModel<float>& model,
                                     const CqtSpectrogram& cqt, bool use_projection);

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);

// Descending cosine similarity; ties broken by ascending reference id.
// exclude_self removes the reference whose id equals the query id.
std::vector<std::vector<std::string>> rank_all(const EmbeddingStore& queries,
                                               const EmbeddingStore& refs,
                                               bool exclude_self);

// AP = (1/R) * sum over relevant ranks k of precision@k
double average_precision(const std::vector<bool>& ranked_relevance);

// relevance = same clique; queries with zero relevant references are
// excluded from mAP and MR1 (their count is n_queries minus
// n_queries_scored).
EvalReport evaluate(const EmbeddingStore& queries, const EmbeddingStore& refs,
                    const std::map<std::string, std::string>& clique_of,
                    bool exclude_self);

// max over vertical shifts i in [-range, range] of the cosine between
// the query embedding and the embedding of the shifted reference
double transposed_max_similarity(ResNetIbnModel<float>& model,
                                 const CqtSpectrogram& query,
                                 const CqtSpectrogram& reference, int shift_range,
                                 bool use_projection = false);

// Embedding file: magic "EMB1", u32 version=1, u32 dim, u64 count, then
// per record u32 id length, id bytes, dim f32 values.
void write_embeddings(const std::string& path, const EmbeddingStore& store);
EmbeddingStore read_embeddings(const std::string& path);

}  // namespace coverid

#endif
