#include "lalign/jsonl.hpp"

#include <fstream>

namespace lalign {

void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("jsonl: cannot open for writing: " + path);
    for (const auto& r : rows) out << r.dump() << "\n";
    if (!out) throw InputError("jsonl: write failed: " + path);
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("jsonl: cannot open: " + path);
    std::vector<nlohmann::json> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            rows.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

std::vector<nlohmann::json> corpus_to_rows(const std::vector<AnnotatedXY>& corpus) {
    std::vector<nlohmann::json> rows;
    rows.reserve(corpus.size());
    for (const auto& ex : corpus) {
        nlohmann::json r;
        r["x"] = ex.xy.x;
        r["y"] = ex.xy.y;
        r["scores"] = ex.scores;
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<AnnotatedXY> rows_to_corpus(const std::vector<nlohmann::json>& rows) {
    std::vector<AnnotatedXY> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        AnnotatedXY ex;
        ex.xy.x = r.at("x").get<Tokens>();
        ex.xy.y = r.at("y").get<Tokens>();
        if (r.contains("scores")) ex.scores = r.at("scores").get<std::vector<double>>();
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<nlohmann::json> cache_to_rows(const std::vector<ResponseCacheEntry>& cache) {
    std::vector<nlohmann::json> rows;
    rows.reserve(cache.size());
    for (const auto& e : cache) {
        nlohmann::json r;
        r["x"] = e.x;
        r["ys"] = e.ys;
        nlohmann::json scores;
        for (size_t a = 0; a < e.scores.size(); ++a)
            scores["attr" + std::to_string(a)] = e.scores[a];
        r["scores"] = scores;
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<ResponseCacheEntry> rows_to_cache(const std::vector<nlohmann::json>& rows) {
    std::vector<ResponseCacheEntry> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        ResponseCacheEntry e;
        e.x = r.at("x").get<Tokens>();
        e.ys = r.at("ys").get<std::vector<Tokens>>();
        if (r.contains("scores")) {
            const auto& s = r.at("scores");
            for (size_t a = 0; s.contains("attr" + std::to_string(a)); ++a)
                e.scores.push_back(s.at("attr" + std::to_string(a)).get<std::vector<double>>());
        }
        out.push_back(std::move(e));
    }
    return out;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("json: cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw InputError("json: write failed: " + path);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("json: cannot open: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
}

}  // namespace lalign
