#include "nsc/tensor_store.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>

#include "nsc/strfmt.hpp"

namespace nsc::store {

namespace {

void put_f64_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double get_f64_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

std::map<std::string, std::string> parse_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw io_error(IoErrorKind::MissingFile, "missing manifest: " + file.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw io_error(IoErrorKind::ManifestParse,
                           strfmt("manifest line %zu has no '=': %s", lineno, line.c_str()));
        }
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty())
            throw io_error(IoErrorKind::ManifestParse, strfmt("manifest line %zu: empty key", lineno));
        kv[key] = val;
    }
    return kv;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw io_error(IoErrorKind::ManifestParse, "bad integer for " + what + ": '" + s + "'");
    }
}

}  // namespace

void save_tensors(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors) {
    std::filesystem::create_directories(dir);

    std::ostringstream man;
    man << "format = nsc-tensors-v1\n";
    man << "tensor_count = " << tensors.size() << "\n";
    std::string blob;
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = tensors[i];
        if (t.name.find('\n') != std::string::npos || t.name.find('=') != std::string::npos)
            throw std::invalid_argument("tensor name not manifest-safe: " + t.name);
        std::uint64_t len = static_cast<std::uint64_t>(t.value.size()) * 8;
        man << "tensor." << i << ".name = " << t.name << "\n";
        man << "tensor." << i << ".shape = " << t.value.rows << " " << t.value.cols << "\n";
        man << "tensor." << i << ".dtype = f64\n";
        man << "tensor." << i << ".byte_offset = " << offset << "\n";
        man << "tensor." << i << ".byte_length = " << len << "\n";
        for (double v : t.value.data) put_f64_le(blob, v);
        offset += len;
    }

    {
        std::ofstream out(dir / "manifest", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / "manifest").string());
        out << man.str();
    }
    {
        std::ofstream out(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / "tensors.bin").string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& dir) {
    auto kv = parse_manifest(dir / "manifest");

    auto field = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end())
            throw io_error(IoErrorKind::ManifestParse, "manifest missing key: " + key);
        return it->second;
    };

    if (field("format") != "nsc-tensors-v1")
        throw io_error(IoErrorKind::ManifestParse, "unknown container format: " + field("format"));

    std::uint64_t count = parse_u64(field("tensor_count"), "tensor_count");
    std::size_t declared_entries = 0;
    for (const auto& [k, v] : kv)
        if (k.rfind("tensor.", 0) == 0 && k.size() > 7 && k.find(".name") != std::string::npos)
            ++declared_entries;
    if (declared_entries != count)
        throw io_error(IoErrorKind::CountMismatch,
                       strfmt("manifest declares %llu tensors but lists %zu entries",
                              static_cast<unsigned long long>(count), declared_entries));

    struct Entry {
        std::string name;
        std::size_t rows, cols;
        std::uint64_t offset, length;
    };
    std::vector<Entry> entries;
    std::uint64_t expected_offset = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string prefix = "tensor." + std::to_string(i) + ".";
        Entry e;
        e.name = field(prefix + "name");
        std::istringstream shp(field(prefix + "shape"));
        long long r = -1, c = -1;
        shp >> r >> c;
        if (shp.fail() || r < 0 || c < 0)
            throw io_error(IoErrorKind::ManifestParse,
                           "bad shape for tensor " + std::to_string(i) + ": '" +
                               field(prefix + "shape") + "'");
        e.rows = static_cast<std::size_t>(r);
        e.cols = static_cast<std::size_t>(c);
        if (field(prefix + "dtype") != "f64")
            throw io_error(IoErrorKind::ManifestParse,
                           "unsupported dtype: " + field(prefix + "dtype"));
        e.offset = parse_u64(field(prefix + "byte_offset"), prefix + "byte_offset");
        e.length = parse_u64(field(prefix + "byte_length"), prefix + "byte_length");
        if (e.length != static_cast<std::uint64_t>(e.rows) * e.cols * 8)
            throw io_error(IoErrorKind::ShapeMismatch,
                           strfmt("tensor %llu '%s': shape %zux%zu needs %llu bytes, manifest says %llu",
                                  static_cast<unsigned long long>(i), e.name.c_str(), e.rows, e.cols,
                                  static_cast<unsigned long long>(e.rows) * e.cols * 8,
                                  static_cast<unsigned long long>(e.length)));
        if (e.offset != expected_offset)
            throw io_error(IoErrorKind::ManifestParse,
                           strfmt("tensor %llu '%s': offset %llu not contiguous (expected %llu)",
                                  static_cast<unsigned long long>(i), e.name.c_str(),
                                  static_cast<unsigned long long>(e.offset),
                                  static_cast<unsigned long long>(expected_offset)));
        expected_offset += e.length;
        entries.push_back(std::move(e));
    }

    std::ifstream blob(dir / "tensors.bin", std::ios::binary | std::ios::ate);
    if (!blob) throw io_error(IoErrorKind::MissingFile, "missing blob: " + (dir / "tensors.bin").string());
    std::uint64_t blob_size = static_cast<std::uint64_t>(blob.tellg());
    if (blob_size != expected_offset) {
        if (blob_size < expected_offset) {
            // a blob ending exactly on a tensor boundary is a whole missing
            // tensor, not a torn write
            for (const auto& e : entries) {
                if (blob_size == e.offset) {
                    throw io_error(IoErrorKind::CountMismatch,
                                   strfmt("blob holds %llu bytes, manifest declares %zu tensors "
                                          "totalling %llu bytes (tensor '%s' onward missing)",
                                          static_cast<unsigned long long>(blob_size), entries.size(),
                                          static_cast<unsigned long long>(expected_offset),
                                          e.name.c_str()));
                }
            }
            throw io_error(IoErrorKind::TruncatedBlob,
                           strfmt("blob truncated: %llu of %llu bytes",
                                  static_cast<unsigned long long>(blob_size),
                                  static_cast<unsigned long long>(expected_offset)));
        }
        throw io_error(IoErrorKind::TrailingData,
                       strfmt("blob has %llu trailing bytes",
                              static_cast<unsigned long long>(blob_size - expected_offset)));
    }

    std::vector<char> raw(blob_size);
    blob.seekg(0);
    blob.read(raw.data(), static_cast<std::streamsize>(blob_size));
    if (!blob) throw io_error(IoErrorKind::TruncatedBlob, "short read on tensors.bin");

    std::vector<NamedTensor> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        Matrix m(e.rows, e.cols);
        const char* p = raw.data() + e.offset;
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = get_f64_le(p + 8 * i);
        if (!m.all_finite())
            throw io_error(IoErrorKind::NonFiniteData, "tensor '" + e.name + "' has non-finite values");
        out.push_back({e.name, std::move(m)});
    }
    return out;
}

}  // namespace nsc::store
