#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "lalign/common.hpp"
#include "lalign/task.hpp"

namespace lalign {

// Line-delimited JSON I/O. nlohmann orders object keys, so identical records
// always serialize to identical bytes.
void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::string& path);

// corpus records: {"x": [ids], "y": [ids]} plus optional attribute scores
std::vector<nlohmann::json> corpus_to_rows(const std::vector<AnnotatedXY>& corpus);
std::vector<AnnotatedXY> rows_to_corpus(const std::vector<nlohmann::json>& rows);

// sampled-response cache: {"x": [...], "ys": [[...] x n], "scores": {"attr0": [...], ...}}
struct ResponseCacheEntry {
    Tokens x;
    std::vector<Tokens> ys;
    std::vector<std::vector<double>> scores;  // [attribute][response]
};
std::vector<nlohmann::json> cache_to_rows(const std::vector<ResponseCacheEntry>& cache);
std::vector<ResponseCacheEntry> rows_to_cache(const std::vector<nlohmann::json>& rows);

void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

}  // namespace lalign
