# Tests package for the ContraNorm lab
