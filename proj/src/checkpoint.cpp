// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/hash.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace rcpmerge {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;
constexpr const char* kMetadataKey = "__metadata__";

[[noreturn]] void malformed(const fs::path& path, const std::string& what) {
    throw ValidationError(fmt::format("malformed header in '{}': {}", path.string(), what));
}

bool mul_overflows(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
    return __builtin_mul_overflow(a, b, &out);
}

// Byte size of a tensor, or throws if it cannot be represented in the u64
// offsets of the container.
std::uint64_t payload_bytes(const Shape& shape, DType dtype, std::string_view name) {
    std::uint64_t n = 1;
    for (auto extent : shape)
        if (mul_overflows(n, extent, n))
            throw ValidationError(fmt::format("tensor '{}' too large for the declared offset width", name));
    if (mul_overflows(n, dtype_size(dtype), n))
        throw ValidationError(fmt::format("tensor '{}' too large for the declared offset width", name));
    return n;
}

std::string build_header(const std::vector<TensorSpec>& specs, const Metadata& metadata) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& spec : specs) {
        const auto bytes = payload_bytes(spec.shape, spec.dtype, spec.name);
        std::uint64_t end = 0;
        if (__builtin_add_overflow(offset, bytes, &end))
            throw ValidationError(fmt::format("tensor '{}' too large for the declared offset width", spec.name));
        header[spec.name] = {{"dtype", dtype_name(spec.dtype)}, {"shape", spec.shape}, {"data_offsets", {offset, end}}};
        offset = end;
    }
    if (!metadata.empty()) header[kMetadataKey] = metadata;

    std::string text;
    try {
        text = header.dump();
    } catch (const json::exception& e) {
        throw ValidationError(fmt::format("cannot encode checkpoint header: {}", e.what()));
    }
    text.append((8 - text.size() % 8) % 8, ' ');
    return text;
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

std::vector<TensorSpec> specs_of(const TensorMap& map) {
    std::vector<TensorSpec> specs;
    specs.reserve(map.size());
    for (const auto& [name, t] : map) specs.push_back({name, t.dtype(), t.shape()});
    return specs;
}

void validate_specs(std::vector<TensorSpec>& specs) {
    std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < specs.size(); ++i)
        if (specs[i].name == specs[i - 1].name)
            throw ValidationError(fmt::format("duplicate tensor name '{}'", specs[i].name));
    for (const auto& s : specs)
        if (s.name == kMetadataKey) throw ValidationError("tensor name '__metadata__' is reserved");
}

}  // namespace

CheckpointReader::CheckpointReader(const fs::path& path, LoadOptions options) : path_(path), options_(options) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) throw IoError(fmt::format("checkpoint '{}' does not exist", path.string()));
    const auto size = fs::file_size(path, ec);
    if (ec) throw IoError(fmt::format("cannot stat '{}': {}", path.string(), ec.message()));
    auto in = std::make_unique<std::ifstream>(path, std::ios::binary);
    if (!*in) throw IoError(fmt::format("cannot open '{}'", path.string()));
    in_ = std::move(in);
    parse_header(size);
}

CheckpointReader::CheckpointReader(std::unique_ptr<std::istream> in, std::uint64_t size, fs::path label,
                                   LoadOptions options)
    : path_(std::move(label)), options_(options), in_(std::move(in)) {
    parse_header(size);
}

CheckpointReader CheckpointReader::from_bytes(std::string bytes, LoadOptions options) {
    const auto size = bytes.size();
    return CheckpointReader(std::make_unique<std::istringstream>(std::move(bytes), std::ios::binary), size,
                            "<memory>", options);
}

void CheckpointReader::parse_header(std::uint64_t size) {
    if (size < 8) malformed(path_, "file shorter than the 8-byte length prefix");
    unsigned char prefix[8];
    in_->read(reinterpret_cast<char*>(prefix), 8);
    if (!*in_) throw IoError(fmt::format("short read on '{}'", path_.string()));
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | prefix[i];
    if (header_len > kMaxHeaderBytes) malformed(path_, fmt::format("header length {} exceeds limit", header_len));
    if (header_len > size - 8)
        malformed(path_, fmt::format("header length {} exceeds file size {}", header_len, size));

    std::string text(header_len, '\0');
    in_->read(text.data(), static_cast<std::streamsize>(header_len));
    if (!*in_) throw IoError(fmt::format("short read on '{}'", path_.string()));
    payload_start_ = 8 + header_len;
    const std::uint64_t payload_size = size - payload_start_;

    std::set<std::string> seen;
    std::string duplicate;
    json header;
    try {
        header = json::parse(text, [&](int depth, json::parse_event_t event, json& parsed) {
            if (event == json::parse_event_t::key && depth == 1) {
                auto key = parsed.get<std::string>();
                if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
            }
            return true;
        });
    } catch (const json::exception& e) {
        malformed(path_, fmt::format("invalid JSON: {}", e.what()));
    }
    if (!duplicate.empty()) malformed(path_, fmt::format("duplicate tensor name '{}'", duplicate));
    if (!header.is_object()) malformed(path_, "header is not a JSON object");

    for (auto& [key, value] : header.items()) {
        if (key == kMetadataKey) {
            if (!value.is_object()) malformed(path_, "__metadata__ is not an object");
            for (auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) malformed(path_, fmt::format("metadata value for '{}' is not a string", mk));
                metadata_[mk] = mv.get<std::string>();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets"))
            malformed(path_, fmt::format("entry '{}' needs dtype, shape and data_offsets", key));
        TensorInfo info;
        info.name = key;
        if (!value["dtype"].is_string()) malformed(path_, fmt::format("entry '{}': dtype is not a string", key));
        try {
            info.dtype = parse_dtype(value["dtype"].get<std::string>());
        } catch (const ValidationError& e) {
            malformed(path_, fmt::format("entry '{}': {}", key, e.what()));
        }
        const auto& shape = value["shape"];
        if (!shape.is_array()) malformed(path_, fmt::format("entry '{}': shape is not an array", key));
        for (const auto& extent : shape) {
            if (!extent.is_number_unsigned() && !(extent.is_number_integer() && extent.get<std::int64_t>() >= 0))
                malformed(path_, fmt::format("entry '{}': shape extents must be non-negative integers", key));
            info.shape.push_back(extent.get<std::uint64_t>());
        }
        const auto& offsets = value["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
            !offsets[1].is_number_unsigned())
            malformed(path_, fmt::format("entry '{}': data_offsets must be two non-negative integers", key));
        info.begin = offsets[0].get<std::uint64_t>();
        info.end = offsets[1].get<std::uint64_t>();
        if (info.begin > info.end) malformed(path_, fmt::format("entry '{}': data_offsets begin > end", key));
        const auto expected = payload_bytes(info.shape, info.dtype, key);
        if (info.end - info.begin != expected)
            malformed(path_, fmt::format("entry '{}': data range holds {} bytes but shape {} at {} needs {}", key,
                                         info.end - info.begin, shape_string(info.shape), dtype_name(info.dtype),
                                         expected));
        if (info.end > payload_size)
            throw ValidationError(fmt::format("truncated payload in '{}': tensor '{}' ends at byte {} but payload has {}",
                                              path_.string(), key, info.end, payload_size));
        infos_.push_back(std::move(info));
    }

    std::vector<const TensorInfo*> by_offset;
    for (const auto& info : infos_) by_offset.push_back(&info);
    std::sort(by_offset.begin(), by_offset.end(),
              [](const auto* a, const auto* b) { return a->begin != b->begin ? a->begin < b->begin : a->end < b->end; });
    for (std::size_t i = 1; i < by_offset.size(); ++i)
        if (by_offset[i]->begin < by_offset[i - 1]->end)
            malformed(path_, fmt::format("data ranges of '{}' and '{}' overlap", by_offset[i - 1]->name,
                                         by_offset[i]->name));

    std::sort(infos_.begin(), infos_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
}

const TensorInfo* CheckpointReader::find(std::string_view name) const {
    auto it = std::lower_bound(infos_.begin(), infos_.end(), name,
                               [](const TensorInfo& info, std::string_view n) { return info.name < n; });
    return (it != infos_.end() && it->name == name) ? &*it : nullptr;
}

Tensor CheckpointReader::read(std::string_view name) {
    const auto* info = find(name);
    if (!info) throw ValidationError(fmt::format("checkpoint '{}' has no tensor '{}'", path_.string(), name));
    Tensor t(info->dtype, info->shape);
    auto dst = t.bytes();
    in_->clear();
    in_->seekg(static_cast<std::streamoff>(payload_start_ + info->begin));
    in_->read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size()));
    if (!*in_) throw IoError(fmt::format("short read of tensor '{}' from '{}'", name, path_.string()));
    if (!options_.allow_nonfinite && !t.all_finite())
        throw NumericError(fmt::format("tensor '{}' in '{}' contains non-finite values", name, path_.string()));
    return t;
}

TensorMap CheckpointReader::read_all() {
    TensorMap map;
    for (const auto& info : infos_) map.insert(info.name, read(info.name));
    map.metadata() = metadata_;
    return map;
}

CheckpointWriter::CheckpointWriter(const fs::path& path, std::vector<TensorSpec> specs, const Metadata& metadata)
    : path_(path), specs_(std::move(specs)) {
    validate_specs(specs_);
    const auto header = build_header(specs_, metadata);
    tmp_path_ = path_;
    tmp_path_ += ".partial";
    out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError(fmt::format("cannot open '{}' for writing", path_.string()));
    write_u64_le(out_, header.size());
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (!out_) throw IoError(fmt::format("write error on '{}'", path_.string()));
}

CheckpointWriter::~CheckpointWriter() {
    if (!finished_) {
        out_.close();
        std::error_code ec;
        fs::remove(tmp_path_, ec);
    }
}

void CheckpointWriter::write(std::string_view name, const Tensor& tensor) {
    if (next_ >= specs_.size() || specs_[next_].name != name)
        throw ValidationError(fmt::format("checkpoint writer: unexpected tensor '{}' (expected '{}')", name,
                                          next_ < specs_.size() ? specs_[next_].name : std::string("<end>")));
    const auto& spec = specs_[next_];
    if (tensor.dtype() != spec.dtype || tensor.shape() != spec.shape)
        throw ValidationError(fmt::format("checkpoint writer: tensor '{}' is {} {} but header declares {} {}", name,
                                          dtype_name(tensor.dtype()), shape_string(tensor.shape()),
                                          dtype_name(spec.dtype), shape_string(spec.shape)));
    const auto bytes = tensor.bytes();
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out_) throw IoError(fmt::format("write error on '{}'", path_.string()));
    ++next_;
}

void CheckpointWriter::finish() {
    if (finished_) return;
    if (next_ != specs_.size())
        throw ValidationError(fmt::format("checkpoint writer: {} of {} tensors written", next_, specs_.size()));
    out_.close();
    if (!out_) throw IoError(fmt::format("write error on '{}'", path_.string()));
    std::error_code ec;
    fs::rename(tmp_path_, path_, ec);
    if (ec) throw IoError(fmt::format("cannot move checkpoint into place at '{}': {}", path_.string(), ec.message()));
    finished_ = true;
}

TensorMap load_checkpoint(const fs::path& path, LoadOptions options) {
    CheckpointReader reader(path, options);
    return reader.read_all();
}

void save_checkpoint(const TensorMap& map, const fs::path& path) {
    CheckpointWriter writer(path, specs_of(map), map.metadata());
    for (const auto& [name, t] : map) writer.write(name, t);
    writer.finish();
}

std::string serialize_checkpoint(const TensorMap& map) {
    auto specs = specs_of(map);
    validate_specs(specs);
    const auto header = build_header(specs, map.metadata());
    std::ostringstream out(std::ios::binary);
    write_u64_le(out, header.size());
    out << header;
    for (const auto& [name, t] : map) {
        const auto bytes = t.bytes();
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    return std::move(out).str();
}

TensorMap deserialize_checkpoint(const std::string& bytes, LoadOptions options) {
    return CheckpointReader::from_bytes(bytes, options).read_all();
}

std::string content_hash(const TensorMap& map) {
    return sha256_hex(serialize_checkpoint(map));
}

}  // namespace rcpmerge
