#pragma once

#include <cstdio>
#include <filesystem>
#include <set>
#include <string>

#include "autoencoder.hpp"
#include "container.hpp"
#include "lenet.hpp"

namespace biasnet {

/// crc32 over (name, shape, raw values) of every tensor not in `exclude`, in declaration order.
template <typename Params>
std::uint32_t params_checksum(const Params& params, const std::set<std::string>& exclude = {})
{
    std::uint32_t crc = 0;
    for (const auto& [name, t] : params.named()) {
        if (exclude.count(name)) continue;
        crc = crc32_of(name.data(), name.size(), crc);
        for (auto d : t->shape()) {
            const auto d64 = static_cast<std::uint64_t>(d);
            crc = crc32_of(&d64, sizeof d64, crc);
        }
        crc = crc32_of(t->data(), t->size() * sizeof(*t->data()), crc);
    }
    return crc;
}

inline std::string hex32(std::uint32_t v)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

/// Anchor id of a parameter set: checksum of every tensor, as 8 hex digits.
template <typename Params>
std::string params_id(const Params& params)
{
    return hex32(params_checksum(params));
}

namespace detail {

inline void put_meta(Container& c, const Meta& meta)
{
    for (const auto& [k, v] : meta) c.meta()["m." + k] = v;
}

inline Meta take_meta(const Container& c)
{
    Meta out;
    for (const auto& [k, v] : c.meta())
        if (k.rfind("m.", 0) == 0) out[k.substr(2)] = v;
    return out;
}

inline std::size_t meta_size(const Container& c, const std::string& key)
{
    return static_cast<std::size_t>(std::stoull(c.meta_at(key)));
}

} // namespace detail

template <typename T>
Container lenet_container(const LeNetParams<T>& p)
{
    Container c("lenet");
    c.meta()["arch.input"] = std::to_string(p.arch.input);
    c.meta()["arch.kernel"] = std::to_string(p.arch.kernel);
    c.meta()["arch.conv1"] = std::to_string(p.arch.conv1);
    c.meta()["arch.conv2"] = std::to_string(p.arch.conv2);
    c.meta()["arch.hidden"] = std::to_string(p.arch.hidden);
    c.meta()["arch.classes"] = std::to_string(p.arch.classes);
    detail::put_meta(c, p.meta);
    for (const auto& [name, t] : p.named()) c.add(name, *t);
    return c;
}

template <typename T>
LeNetParams<T> lenet_from_container(const Container& c)
{
    if (c.kind() != "lenet") throw FormatError("expected a lenet checkpoint, found kind '" + c.kind() + "'");
    LeNetArch arch;
    arch.input = detail::meta_size(c, "arch.input");
    arch.kernel = detail::meta_size(c, "arch.kernel");
    arch.conv1 = detail::meta_size(c, "arch.conv1");
    arch.conv2 = detail::meta_size(c, "arch.conv2");
    arch.hidden = detail::meta_size(c, "arch.hidden");
    arch.classes = detail::meta_size(c, "arch.classes");
    auto p = LeNetParams<T>::zeros(arch);
    for (auto& [name, t] : p.named()) {
        auto loaded = c.get<T>(name);
        if (loaded.shape() != t->shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_string(loaded.shape()) +
                              ", expected " + shape_string(t->shape()));
        *t = std::move(loaded);
    }
    p.meta = detail::take_meta(c);
    if (!p.all_finite()) throw FormatError("checkpoint contains non-finite values");
    return p;
}

template <typename T>
void save_checkpoint(const LeNetParams<T>& p, const std::filesystem::path& path)
{
    lenet_container(p).save(path);
}

template <typename T = float>
LeNetParams<T> load_checkpoint(const std::filesystem::path& path)
{
    return lenet_from_container<T>(Container::load(path));
}

template <typename T>
void save_da(const DAParams<T>& p, const std::filesystem::path& path)
{
    Container c("denoising-autoencoder");
    c.meta()["tied"] = p.tied ? "1" : "0";
    detail::put_meta(c, p.meta);
    for (const auto& [name, t] : p.named()) c.add(name, *t);
    c.save(path);
}

template <typename T = float>
DAParams<T> load_da(const std::filesystem::path& path)
{
    const auto c = Container::load(path);
    if (c.kind() != "denoising-autoencoder")
        throw FormatError(path.string() + ": expected a denoising-autoencoder checkpoint");
    DAParams<T> p;
    p.weights = c.get<T>("da.weight");
    p.b_hidden = c.get<T>("da.hidden_bias");
    p.b_visible = c.get<T>("da.visible_bias");
    p.tied = c.meta_at("tied") == "1";
    p.meta = detail::take_meta(c);
    if (p.b_hidden.size() != p.hidden() || p.b_visible.size() != p.visible())
        throw FormatError(path.string() + ": autoencoder bias lengths do not match the weights");
    return p;
}

} // namespace biasnet
