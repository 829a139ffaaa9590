"""
Blob memory reuse
=================
"""

from mixprec.graph import plan_memory, with_precision
from mixprec.graph import zoo

# eight ReLUs in a row: two buffers suffice
chain = zoo.chain_graph(8)
off, on = plan_memory(chain, reuse=False), plan_memory(chain, reuse=True)
print(f"chain8: {off.peak_bytes} bytes in {off.slot_count} slots -> {on.peak_bytes} bytes in {on.slot_count}")
for slot, size, blobs in on.table():
    print(f"  slot {slot}: {size} bytes  {' '.join(blobs)}")

# a small CNN at each precision
for dtype in ("fp32", "fp16", "int8"):
    g = with_precision(zoo.conv_graph(), dtype)
    off, on = plan_memory(g, False), plan_memory(g, True)
    print(f"small_cnn {dtype:>5}: {off.peak_bytes:6d} -> {on.peak_bytes:6d} bytes ({1 - on.peak_bytes / off.peak_bytes:.0%} saved)")

# marking a blob for inspection keeps it out of the shared pool
chain.inspect = ["relu4"]
print("with relu4 pinned:", plan_memory(chain).slot_count, "slots")
