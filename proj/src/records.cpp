#include "cirm/records.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace cirm {

using ordered_json = nlohmann::ordered_json;

void EmbeddingRecord::validate() const {
    if (text.rank() != 2 || text.dim(0) < 1) throw DimensionError("record " + id + ": text must be [L,d], L>=1");
    if (images.rank() != 2 || images.dim(0) < 1 || images.dim(0) > kMaxImages)
        throw DimensionError("record " + id + ": images must be [n,d], 1<=n<=4");
    const std::size_t d = text.dim(1);
    if (images.dim(1) != d || ocr.rank() != 2 || ocr.dim(0) != images.dim(0) || ocr.dim(1) != d)
        throw DimensionError("record " + id + ": text/images/ocr dims disagree");
    if (ocr_present.size() != images.dim(0))
        throw DimensionError("record " + id + ": ocr_present length");
    for (int f : ocr_present)
        if (f != 0 && f != 1) throw DimensionError("record " + id + ": ocr_present entries must be 0/1");
    if (rating < 0 || rating > 5) throw DimensionError("record " + id + ": rating out of [0,5]");
    if (label != 0 && label != 1) throw DimensionError("record " + id + ": label must be 0/1");
}

namespace {

ordered_json matrix_to_json(const Tensor& m) {
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < m.dim(0); ++r) {
        ordered_json row = ordered_json::array();
        for (std::size_t c = 0; c < m.dim(1); ++c) row.push_back(m.at2(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Tensor matrix_from_json(const ordered_json& j, std::size_t line, const char* field) {
    if (!j.is_array() || j.empty())
        throw ParseError("line " + std::to_string(line) + ": field '" + field +
                         "' must be a non-empty array of rows");
    const std::size_t rows = j.size();
    std::size_t cols = 0;
    std::vector<double> data;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto& row = j[r];
        if (!row.is_array())
            throw ParseError("line " + std::to_string(line) + ": field '" + field +
                             "' row " + std::to_string(r) + " is not an array");
        if (r == 0) {
            cols = row.size();
            if (cols == 0)
                throw ParseError("line " + std::to_string(line) + ": field '" + field +
                                 "' has an empty row");
            data.reserve(rows * cols);
        } else if (row.size() != cols) {
            throw ParseError("line " + std::to_string(line) + ": field '" + field +
                             "' row " + std::to_string(r) + " has ragged width");
        }
        for (const auto& v : row) {
            if (!v.is_number())
                throw ParseError("line " + std::to_string(line) + ": field '" + field +
                                 "' contains a non-numeric entry");
            data.push_back(v.get<double>());
        }
    }
    return Tensor({rows, cols}, std::move(data));
}

}  // namespace

void write_records(const std::string& path, const std::vector<EmbeddingRecord>& records,
                   std::size_t d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open for writing: " + path);
    ordered_json header;
    header["format"] = "cirm-records";
    header["version"] = 1;
    header["d"] = d;
    header["n_max"] = kMaxImages;
    out << header.dump() << "\n";
    for (const auto& r : records) {
        r.validate();
        if (r.dim() != d) throw DimensionError("record " + r.id + ": d mismatch with header");
        ordered_json o;
        o["id"] = r.id;
        o["text"] = matrix_to_json(r.text);
        o["images"] = matrix_to_json(r.images);
        o["ocr"] = matrix_to_json(r.ocr);
        o["ocr_present"] = r.ocr_present;
        o["rating"] = r.rating;
        o["label"] = r.label;
        out << o.dump() << "\n";
    }
    if (!out) throw ParseError("write failed: " + path);
}

std::vector<EmbeddingRecord> read_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open: " + path);
    std::string line;
    std::size_t lineno = 0;
    std::size_t d = 0;
    std::vector<EmbeddingRecord> out;
    static const std::set<std::string> kRecordKeys = {"id",  "text",        "images",
                                                      "ocr", "ocr_present", "rating",
                                                      "label"};
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        if (lineno == 1) {
            for (const char* k : {"format", "version", "d", "n_max"})
                if (!j.contains(k))
                    throw ParseError("line 1: missing header field '" + std::string(k) + "'");
            if (j["format"] != "cirm-records")
                throw ParseError("line 1: field 'format' must be \"cirm-records\"");
            if (j["version"] != 1) throw ParseError("line 1: unsupported version");
            if (!j["d"].is_number_unsigned() || j["d"].get<std::size_t>() == 0)
                throw ParseError("line 1: field 'd' must be a positive integer");
            if (j["n_max"] != kMaxImages)
                throw ParseError("line 1: field 'n_max' must be 4");
            for (auto it = j.begin(); it != j.end(); ++it)
                if (it.key() != "format" && it.key() != "version" && it.key() != "d" &&
                    it.key() != "n_max")
                    throw ParseError("line 1: unknown field '" + it.key() + "'");
            d = j["d"].get<std::size_t>();
            continue;
        }
        if (d == 0) throw ParseError("line 1: missing header");
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!kRecordKeys.count(it.key()))
                throw ParseError("line " + std::to_string(lineno) + ": unknown field '" +
                                 it.key() + "'");
        for (const auto& k : kRecordKeys)
            if (!j.contains(k))
                throw ParseError("line " + std::to_string(lineno) + ": missing field '" + k +
                                 "'");
        EmbeddingRecord r;
        if (!j["id"].is_string())
            throw ParseError("line " + std::to_string(lineno) + ": field 'id' must be a string");
        r.id = j["id"].get<std::string>();
        r.text = matrix_from_json(j["text"], lineno, "text");
        r.images = matrix_from_json(j["images"], lineno, "images");
        r.ocr = matrix_from_json(j["ocr"], lineno, "ocr");
        if (!j["ocr_present"].is_array())
            throw ParseError("line " + std::to_string(lineno) + ": field 'ocr_present' must be an array");
        for (const auto& v : j["ocr_present"]) {
            if (!v.is_number_integer())
                throw ParseError("line " + std::to_string(lineno) +
                                 ": field 'ocr_present' entries must be integers");
            r.ocr_present.push_back(v.get<int>());
        }
        if (!j["rating"].is_number_integer())
            throw ParseError("line " + std::to_string(lineno) + ": field 'rating' must be an integer");
        if (!j["label"].is_number_integer())
            throw ParseError("line " + std::to_string(lineno) + ": field 'label' must be an integer");
        r.rating = j["rating"].get<int>();
        r.label = j["label"].get<int>();
        if (r.text.dim(1) != d)
            throw ParseError("line " + std::to_string(lineno) + ": field 'text' width " +
                             std::to_string(r.text.dim(1)) + " != header d " + std::to_string(d));
        try {
            r.validate();
        } catch (const DimensionError& e) {
            throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(std::move(r));
    }
    if (lineno == 0) throw ParseError("line 1: missing header");
    return out;
}

}  // namespace cirm
