#pragma once

// Manifest-plus-blob container shared by checkpoints, bias banks and dataset caches.
//
//   biasnet-container
//   version 1
//   kind <kind>
//   meta <key> <value to end of line>
//   tensor <name> <dtype> <d0,d1,...> <offset> <length>
//   payload <bytes> <crc32 as 8 hex digits>
//   end
//   <payload: raw little-endian tensor data, concatenated>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "errors.hpp"
#include "tensor.hpp"

namespace biasnet {

inline constexpr int kContainerVersion = 1;
inline constexpr std::string_view kContainerMagic = "biasnet-container";

inline std::uint32_t crc32_of(const void* data, std::size_t n, std::uint32_t crc = 0)
{
    const auto* p = static_cast<const Bytef*>(data);
    uLong c = crc;
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = ::crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

template <typename T>
constexpr std::string_view dtype_name()
{
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else if constexpr (std::is_same_v<T, std::uint8_t>) return "u8";
    else static_assert(sizeof(T) == 0, "unsupported container dtype");
}

inline std::size_t dtype_size(std::string_view dtype)
{
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    if (dtype == "u8") return 1;
    throw FormatError("unknown dtype '" + std::string(dtype) + "'");
}

namespace detail {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, std::span<const T> values)
{
    const std::size_t off = out.size();
    out.resize(off + values.size_bytes());
    std::memcpy(out.data() + off, values.data(), values.size_bytes());
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            auto* b = out.data() + off + i * sizeof(T);
            std::reverse(b, b + sizeof(T));
        }
    }
}

template <typename T>
T read_le(const std::uint8_t* p)
{
    T v;
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        std::uint8_t tmp[sizeof(T)];
        std::reverse_copy(p, p + sizeof(T), tmp);
        std::memcpy(&v, tmp, sizeof(T));
    } else {
        std::memcpy(&v, p, sizeof(T));
    }
    return v;
}

} // namespace detail

/// In-memory image of one container file.
class Container {
public:
    struct Entry {
        std::string dtype;
        Shape shape;
        std::size_t offset = 0;
        std::size_t length = 0;
    };

    Container() = default;
    explicit Container(std::string kind) : kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }
    Meta& meta() noexcept { return meta_; }
    const Meta& meta() const noexcept { return meta_; }

    const std::string& meta_at(const std::string& key) const
    {
        auto it = meta_.find(key);
        if (it == meta_.end()) throw FormatError("container (" + kind_ + ") is missing meta key '" + key + "'");
        return it->second;
    }

    template <typename T>
    void add(const std::string& name, const Tensor<T>& t)
    {
        if (name.find_first_of(" \t\n") != std::string::npos)
            throw ValueError("container tensor names may not contain whitespace: '" + name + "'");
        if (entries_.count(name)) throw ValueError("duplicate container tensor '" + name + "'");
        Entry e{std::string(dtype_name<T>()), t.shape(), payload_.size(), t.size() * sizeof(T)};
        detail::append_le<T>(payload_, t.values());
        entries_.emplace(name, e);
        order_.push_back(name);
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    const std::vector<std::string>& names() const noexcept { return order_; }
    const Entry& entry(const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw FormatError("container (" + kind_ + ") has no tensor '" + name + "'");
        return it->second;
    }

    /// Reads a tensor, converting between floating dtypes if needed.
    template <typename T>
    Tensor<T> get(const std::string& name) const
    {
        const Entry& e = entry(name);
        const std::size_t n = shape_size(e.shape);
        std::vector<T> values(n);
        const std::uint8_t* p = payload_.data() + e.offset;
        if (e.dtype == "f32")
            for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(detail::read_le<float>(p + 4 * i));
        else if (e.dtype == "f64")
            for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(detail::read_le<double>(p + 8 * i));
        else if (e.dtype == "u8")
            for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(p[i]);
        else
            throw FormatError("unknown dtype '" + e.dtype + "'");
        return Tensor<T>(e.shape, std::move(values));
    }

    std::string manifest() const
    {
        std::ostringstream os;
        os << kContainerMagic << '\n' << "version " << kContainerVersion << '\n' << "kind " << kind_ << '\n';
        for (const auto& [k, v] : meta_) {
            if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos)
                throw ValueError("container meta '" + k + "' must be a single-line key/value");
            os << "meta " << k << ' ' << v << '\n';
        }
        for (const auto& name : order_) {
            const Entry& e = entries_.at(name);
            os << "tensor " << name << ' ' << e.dtype << ' ';
            for (std::size_t i = 0; i < e.shape.size(); ++i) os << (i ? "," : "") << e.shape[i];
            os << ' ' << e.offset << ' ' << e.length << '\n';
        }
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", crc32_of(payload_.data(), payload_.size()));
        os << "payload " << payload_.size() << ' ' << crc << '\n' << "end\n";
        return os.str();
    }

    void save(const std::filesystem::path& path) const
    {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
        const std::string m = manifest();
        out.write(m.data(), static_cast<std::streamsize>(m.size()));
        out.write(reinterpret_cast<const char*>(payload_.data()), static_cast<std::streamsize>(payload_.size()));
        if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
    }

    static Container load(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        try {
            return parse(std::string_view(bytes.data(), bytes.size()));
        } catch (const FormatError& e) {
            rethrow_with_path(e, path);
        }
    }

    static Container parse(std::string_view bytes)
    {
        Container c;
        std::size_t pos = 0;
        auto next_line = [&]() -> std::string_view {
            const auto nl = bytes.find('\n', pos);
            if (nl == std::string_view::npos) throw TruncatedError("container manifest ends before 'end'");
            auto line = bytes.substr(pos, nl - pos);
            pos = nl + 1;
            return line;
        };
        if (next_line() != kContainerMagic) throw BadMagicError("not a biasnet container");
        {
            std::istringstream ls{std::string(next_line())};
            std::string key;
            int version = -1;
            ls >> key >> version;
            if (key != "version") throw FormatError("container: expected version line");
            if (version != kContainerVersion)
                throw VersionError("container version " + std::to_string(version) + " (supported: " +
                                   std::to_string(kContainerVersion) + ")");
        }
        std::size_t payload_bytes = 0;
        std::uint32_t payload_crc = 0;
        bool have_payload = false;
        for (;;) {
            const std::string line(next_line());
            if (line == "end") break;
            const auto sp = line.find(' ');
            const std::string key = line.substr(0, sp);
            const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
            if (key == "kind") {
                c.kind_ = rest;
            } else if (key == "meta") {
                const auto s2 = rest.find(' ');
                c.meta_[rest.substr(0, s2)] = s2 == std::string::npos ? "" : rest.substr(s2 + 1);
            } else if (key == "tensor") {
                std::istringstream ls(rest);
                std::string name, dims;
                Entry e;
                ls >> name >> e.dtype >> dims >> e.offset >> e.length;
                if (!ls) throw FormatError("container: malformed tensor line '" + line + "'");
                std::stringstream ds(dims);
                for (std::string d; std::getline(ds, d, ',');) e.shape.push_back(std::stoull(d));
                if (shape_size(e.shape) * dtype_size(e.dtype) != e.length)
                    throw FormatError("container: tensor '" + name + "' length does not match its shape");
                c.entries_.emplace(name, e);
                c.order_.push_back(name);
            } else if (key == "payload") {
                std::istringstream ls(rest);
                std::string crc;
                ls >> payload_bytes >> crc;
                if (!ls) throw FormatError("container: malformed payload line");
                payload_crc = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
                have_payload = true;
            } else {
                throw FormatError("container: unknown manifest line '" + line + "'");
            }
        }
        if (!have_payload) throw FormatError("container: manifest has no payload line");
        if (bytes.size() - pos < payload_bytes)
            throw TruncatedError("container payload truncated: expected " + std::to_string(payload_bytes) +
                                 " bytes, found " + std::to_string(bytes.size() - pos));
        c.payload_.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                          bytes.begin() + static_cast<std::ptrdiff_t>(pos + payload_bytes));
        if (crc32_of(c.payload_.data(), c.payload_.size()) != payload_crc)
            throw ChecksumError("container payload checksum mismatch");
        for (const auto& [name, e] : c.entries_)
            if (e.offset + e.length > payload_bytes)
                throw TruncatedError("container: tensor '" + name + "' extends past the payload");
        return c;
    }

private:
    [[noreturn]] static void rethrow_with_path(const FormatError& e, const std::filesystem::path& path)
    {
        const std::string msg = path.string() + ": " + e.what();
        if (dynamic_cast<const ChecksumError*>(&e)) throw ChecksumError(msg);
        if (dynamic_cast<const VersionError*>(&e)) throw VersionError(msg);
        if (dynamic_cast<const TruncatedError*>(&e)) throw TruncatedError(msg);
        if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(msg);
        throw FormatError(msg);
    }

    std::string kind_;
    Meta meta_;
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
    std::vector<std::uint8_t> payload_;
};

} // namespace biasnet
